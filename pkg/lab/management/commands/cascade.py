import pandas as pd

from lab.commands import LabCommand
from pipelines.cascade import CascadeConfig, FrozenProblem, cascade_solve, gap_sweep, propagation_bound
from pipelines.problems import list_problems, load_problem


class Command(LabCommand):
    help = '伪马氏级联：上下两条级联的根值、间隙与逐层统计'
    has_table = True

    def add_lab_arguments(self, parser):
        parser.add_argument('--problem', required=True, help=f'问题名或 YAML 路径，内置: {", ".join(list_problems())}')
        parser.add_argument('--epsilon', type=float, default=None)
        parser.add_argument('--m', type=int, default=None)
        parser.add_argument('--dx', type=float, default=None)
        parser.add_argument('--samples', type=int, default=None, help='底层蒙特卡洛样本数')
        parser.add_argument('--sweep', type=int, nargs='+', default=None, help='在多个 m 上做夹逼检查')
        parser.add_argument('--propagation', action='store_true', help='附带误差传播界')

    def run(self, options, pool):
        config = load_problem(options['problem'], kind="cascade")
        problem = FrozenProblem.from_config(config)
        cascade_config = CascadeConfig.from_config(
            config.section("cascade", required=False), epsilon=options['epsilon'], m=options['m'],
            dx=options['dx'], mc_samples=options['samples'], seed=options['seed'])
        if options['sweep']:
            report = gap_sweep(problem, cascade_config, options['sweep'], pool)
            payload = {"problem": problem.name, "epsilon": cascade_config.epsilon, **report}
            return payload, pd.DataFrame(report["rows"])
        solution = cascade_solve(problem, cascade_config, pool)
        payload = solution.report()
        if options['propagation']:
            payload["propagation"] = propagation_bound(solution, seed=options['seed'])
        return payload, pd.DataFrame(payload["per_level_stats"])
