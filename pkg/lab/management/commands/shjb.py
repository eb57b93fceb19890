import numpy as np
import pandas as pd

from lab.commands import LabCommand
from pipelines.cascade import random_path
from pipelines.problems import load_problem
from pipelines.shjb import SHJBConfig, SHJBProblem, boundedness_check, compare_values, epsilon_sweep
from solvers.nonlinear_expectation import derive_seed


class Command(LabCommand):
    help = '随机系数 HJB：直接值与级联值的比较'
    has_table = True

    def add_lab_arguments(self, parser):
        parser.add_argument('--problem', required=True, help='问题名或 YAML 路径')
        parser.add_argument('--epsilon', type=float, default=None)
        parser.add_argument('--samples', type=int, default=None)
        parser.add_argument('--t', type=float, default=0.0, help='求值时刻')
        parser.add_argument('--x', type=float, default=0.0, help='受控状态的初值')
        parser.add_argument('--sweep', type=float, nargs='+', default=None, help='在多个 ε 上比较')

    def run(self, options, pool):
        config = load_problem(options['problem'], kind="shjb")
        problem = SHJBProblem.from_config(config)
        shjb_config = SHJBConfig.from_config(config.section("shjb", required=False), epsilon=options['epsilon'],
                                             samples=options['samples'], seed=options['seed'])
        # 路径由种子确定，t 之前的部分作为已观测历史
        omega = random_path(np.random.default_rng(derive_seed(options['seed'], "omega")), problem.T)
        t, x = options['t'], options['x']
        if options['sweep']:
            report = epsilon_sweep(problem, t, omega, x, shjb_config, options['sweep'], pool)
            payload = {"problem": problem.name, "t": t, "x": x, **report}
            return payload, pd.DataFrame(report["rows"])
        result = compare_values(problem, t, omega, x, shjb_config, pool)
        bounded = boundedness_check(problem, [result["direct"], result["cascade"]], t)
        payload = {"problem": problem.name, "t": t, "x": x, **result, "boundedness": bounded,
                   "success": bounded["success"]}
        return payload, pd.DataFrame([result])
