import numpy as np
import pandas as pd

from lab.commands import LabCommand
from pipelines.cascade import random_path
from pipelines.isaacs import (
    GameConfig, GameSpec, cascade_state, game_cascade_value, isaacs_condition_check, value_equality_check,
)
from pipelines.problems import load_problem
from solvers.nonlinear_expectation import derive_seed


class Command(LabCommand):
    help = 'Isaacs 博弈：上下值、Isaacs 条件与级联值'
    has_table = True

    def add_lab_arguments(self, parser):
        parser.add_argument('--problem', required=True, help='博弈名或 YAML 路径')
        parser.add_argument('--epsilon', type=float, default=None)
        parser.add_argument('--depth', type=int, default=None)
        parser.add_argument('--samples', type=int, default=None)
        parser.add_argument('--t', type=float, default=0.0)
        parser.add_argument('--cascade', action='store_true', help='附带级联值与冻结路径偏差')

    def run(self, options, pool):
        config = load_problem(options['problem'], kind="game")
        spec = GameSpec.from_config(config)
        game_config = GameConfig.from_config(config.section("game", required=False), epsilon=options['epsilon'],
                                             depth=options['depth'], samples=options['samples'],
                                             seed=options['seed'])
        t = options['t']
        omega = random_path(np.random.default_rng(derive_seed(options['seed'], "omega")), spec.T)
        report = value_equality_check(spec, t, omega, game_config, pool)
        isaacs = isaacs_condition_check(spec, seed=options['seed'])
        payload = {"problem": spec.name, "t": t, **report, "isaacs_points": isaacs["points"],
                   "worst_point": isaacs["worst_point"]}
        if options['cascade']:
            pi, x_bar = cascade_state(omega, t, game_config.epsilon, spec.L1)
            payload["cascade"] = {
                "upper": game_cascade_value(spec, pi, t, x_bar, game_config, pool, upper=True).to_dict(),
                "lower": game_cascade_value(spec, pi, t, x_bar, game_config, pool, upper=False).to_dict(),
                "levels": len(pi),
            }
        table = pd.DataFrame([{"variant": "upper", "value": report["upper"], "stderr": report["upper_stderr"]},
                              {"variant": "lower", "value": report["lower"], "stderr": report["lower_stderr"]}])
        return payload, table
