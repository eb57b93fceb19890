import math

import numpy as np

from lab.commands import LabCommand
from pipelines.registry import FUNCTIONALS, make_functional
from solvers.nonlinear_expectation import (
    FAMILY_KINDS, MeasureFamilySpec, family_by_name, hjb_oracle_1d, lower_expectation, upper_expectation,
)
from utils.errors import ConfigurationError


class Command(LabCommand):
    help = '非线性期望 Ē^L / E̲^L 的蒙特卡洛估计，d = 1 时可附 HJB 预言机'

    def add_lab_arguments(self, parser):
        parser.add_argument('--functional', required=True, choices=sorted(FUNCTIONALS))
        parser.add_argument('--L', type=float, default=1.0)
        parser.add_argument('--T', type=float, default=1.0)
        parser.add_argument('--d', type=int, default=1)
        parser.add_argument('--samples', type=int, default=10000)
        parser.add_argument('--step', type=float, default=None)
        parser.add_argument('--family', choices=FAMILY_KINDS, default='constant')
        parser.add_argument('--lower', action='store_true', help='估计 E̲^L')
        parser.add_argument('--oracle-dx', type=float, default=None, help='附带 HJB 预言机（仅 d = 1、终端型泛函）')

    def run(self, options, pool):
        functional = make_functional(options['functional'])
        L, T, d = options['L'], options['T'], options['d']
        spec = MeasureFamilySpec(L=L, d=d, T=T, step=options['step'] or T / 100.0)
        family = family_by_name(options['family'], L, d)
        estimate = (lower_expectation if options['lower'] else upper_expectation)(
            functional, spec, family, options['samples'], options['seed'], pool)
        payload = {"functional": functional.name, "L": L, "T": T, "d": d, "lower": options['lower'],
                   "value": estimate.value, "stderr": estimate.stderr, "n_samples": estimate.n_samples,
                   "argmax_control": estimate.argmax}

        dx = options['oracle_dx']
        if dx is not None:
            if d != 1 or not functional.terminal_only or options['lower']:
                raise ConfigurationError("HJB 预言机只支持 d = 1 的终端型泛函的上期望")
            phi = functional.terminal_map
            space = np.arange(-6.0, 6.0 + dx / 2.0, dx)
            dt = dx * dx / (2.0 * L + L * dx)
            times = np.linspace(0.0, T, int(math.ceil(T / dt)) + 1)
            payload["oracle"] = hjb_oracle_1d(lambda x: phi(x[:, None]), L, T, space, times)
        return payload, None
