import numpy as np

from core.hitting import ConeSpec
from lab.commands import LabCommand
from solvers.cone_pde import auto_grid, mc_bounding_value, solve_cone, solve_cylinder
from solvers.generators import GENERATORS, make_generator

BOUNDARIES = {
    "constant": lambda s, x: np.ones(x.shape[0]),
    "time": lambda s, x: np.broadcast_to(s, x.shape[:1]),
    "abs": lambda s, x: np.linalg.norm(x, axis=1),
}


class Command(LabCommand):
    help = '锥域（或柱域）上冻结 PDE 的单调显式差分求解'
    has_table = True

    def add_lab_arguments(self, parser):
        parser.add_argument('--generator', choices=sorted(GENERATORS), default='zero')
        parser.add_argument('--L', type=float, default=None, help='upper/lower 生成元的 L')
        parser.add_argument('--C0', type=float, default=0.0)
        parser.add_argument('--boundary', choices=sorted(BOUNDARIES), default='time')
        parser.add_argument('--domain', choices=('cone', 'cylinder'), default='cone')
        parser.add_argument('--t0', type=float, default=0.0)
        parser.add_argument('--epsilon', type=float, default=0.5, help='锥底（柱）半径')
        parser.add_argument('--L1', type=float, default=1.0)
        parser.add_argument('--T', type=float, default=1.0)
        parser.add_argument('--dx', type=float, default=0.005)
        parser.add_argument('--dt', type=float, default=None)
        parser.add_argument('--dim', type=int, default=1)
        parser.add_argument('--mc-samples', type=int, default=0, help='>0 时附带上界方程的概率表示')

    def run(self, options, pool):
        params = {}
        if options['generator'] in ('upper', 'lower'):
            params = {"L": options['L'] if options['L'] is not None else 1.0, "C0": options['C0']}
        generator = make_generator(options['generator'], **params)
        boundary = BOUNDARIES[options['boundary']]
        if options['domain'] == 'cylinder':
            dt = options['dt'] or options['dx']
            field = solve_cylinder(generator, options['t0'], options['epsilon'], options['T'], options['dx'], dt,
                                   boundary, options['dim'])
            spec = None
        else:
            spec = ConeSpec(options['t0'], options['epsilon'], options['L1'], options['T'])
            grid = auto_grid(spec, generator, options['dx'], options['dt'], options['dim'])
            field = solve_cone(generator, grid, boundary)
        payload = {
            "generator": generator.describe(),
            "domain": options['domain'],
            "boundary": options['boundary'],
            "apex_value": field.apex_value,
            "n_steps": field.grid.n_steps,
            "dt": field.grid.step,
            "cfl_number": field.grid.cfl_number(generator),
        }
        if options['mc_samples'] > 0 and spec is not None:
            L = options['L'] if options['L'] is not None else 1.0
            estimate = mc_bounding_value(boundary, spec, L, options['C0'], options['mc_samples'], options['seed'],
                                         lower=options['generator'] == 'lower', pool=pool)
            payload["mc_bounding"] = estimate.to_dict()
        return payload, field.to_frame()
