import math

import numpy as np
import pytest

from core.paths import SampledPath
from pipelines.cascade import FrozenProblem
from pipelines.problems import list_problems, load_problem
from pipelines.registry import (
    FUNCTIONALS, make_driver, make_functional, make_game_driver, make_terminal, running_max, terminal_square,
    time_average,
)
from utils.errors import ConfigurationError

VALID = """\
kind: cascade
name: sample
T: 0.5
L: 1.0
generator:
  type: zero
terminal:
  type: constant
  c: 2.0
"""


def write(tmp_path, text, name="sample.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadProblem:
    def test_builtin_catalog(self):
        names = list_problems()
        for name in ("heat", "zero_constant", "running_max", "shjb_drift", "game_saddle", "game_pennies"):
            assert name in names

    def test_builtin_problems_parse(self):
        for name in list_problems():
            config = load_problem(name)
            assert config.get("kind", kind=str) in ("cascade", "shjb", "game")

    def test_kind_mismatch(self):
        with pytest.raises(ConfigurationError):
            load_problem("heat", kind="shjb")

    def test_missing_file(self):
        with pytest.raises(ConfigurationError):
            load_problem("no_such_problem")

    def test_valid_file(self, tmp_path):
        problem = FrozenProblem.from_config(load_problem(write(tmp_path, VALID), kind="cascade"))
        assert problem.T == 0.5
        assert problem.L1 == 2.0
        assert problem.discount_catalog == (-1.0, 0.0, 1.0)

    def test_bad_value_reports_line(self, tmp_path):
        path = write(tmp_path, VALID.replace("T: 0.5", "T: -0.5"))
        with pytest.raises(ConfigurationError, match=r"sample\.yaml:3"):
            FrozenProblem.from_config(load_problem(path))

    def test_unknown_generator_reports_line(self, tmp_path):
        path = write(tmp_path, VALID.replace("type: zero", "type: quadratic"))
        with pytest.raises(ConfigurationError, match=r"sample\.yaml:6: generator\.type"):
            FrozenProblem.from_config(load_problem(path))

    def test_unknown_key_reports_line(self, tmp_path):
        path = write(tmp_path, VALID + "bogus: 1\n")
        with pytest.raises(ConfigurationError, match=r"sample\.yaml:10: bogus"):
            FrozenProblem.from_config(load_problem(path))

    def test_wrong_type(self, tmp_path):
        path = write(tmp_path, VALID.replace("L: 1.0", "L: fast"))
        with pytest.raises(ConfigurationError, match=r"sample\.yaml:4"):
            FrozenProblem.from_config(load_problem(path))

    def test_syntax_error(self, tmp_path):
        path = write(tmp_path, "kind: cascade\nT: [0.5\n")
        with pytest.raises(ConfigurationError, match="YAML"):
            load_problem(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_problem(write(tmp_path, "- 1\n- 2\n"))

    def test_sandwich_is_checked_at_load(self, tmp_path):
        path = write(tmp_path, VALID.replace("type: zero", "type: heat\n  coef: 3.0"))
        with pytest.raises(ConfigurationError):
            FrozenProblem.from_config(load_problem(path))


class TestFunctionals:
    def test_registry_names(self):
        assert {"constant", "terminal", "terminal_square", "running_max", "time_average"} <= set(FUNCTIONALS)

    def test_on_path(self):
        path = SampledPath.from_knots([(0.0, 0.0), (0.5, 1.0), (1.0, -2.0)])
        assert terminal_square().on_path(path) == pytest.approx(4.0)
        assert running_max().on_path(path) == pytest.approx(2.0)
        assert time_average().on_path(path) == pytest.approx(0.0)

    def test_running_max_cap(self):
        path = SampledPath.from_knots([(0.0, 0.0), (1.0, 3.0)])
        assert running_max(cap=2.0).on_path(path) == 2.0
        assert not running_max().terminal_only

    def test_shifted_and_negated(self):
        xi = make_functional("cosine_terminal")
        values = np.zeros((2, 3, 1))
        times = np.linspace(0.0, 1.0, 3)
        assert xi.shifted(1.0)(times, values).tolist() == [2.0, 2.0]
        assert xi.negated()(times, values).tolist() == [-1.0, -1.0]
        assert xi.shifted(1.0).terminal_map(np.zeros((1, 1)))[0] == 2.0
        assert xi.shifted(-0.5).bound == 1.5

    def test_constant_bound(self):
        assert make_functional("constant", c=-3.0).bound == 3.0
        assert math.isinf(make_functional("terminal").bound)

    def test_unknown_and_bad_params(self):
        with pytest.raises(ConfigurationError):
            make_functional("exotic")
        with pytest.raises(ConfigurationError):
            make_functional("terminal_square", cap=1.0)


class TestCoefficientRegistry:
    def test_affine_driver_general_form(self):
        driver = make_driver("discount", c=0.5)
        current = np.zeros(3)
        assert driver.is_affine
        assert driver.general(0.0, current, current, np.ones(3), 0.0).tolist() == [-0.5] * 3

    def test_terminal_lookup(self):
        g = make_terminal("capped_state_square", cap=1.0)
        assert g(np.array([0.0, 1.0]), np.zeros((2, 2)), np.array([0.5, 3.0])).tolist() == [0.25, 1.0]

    def test_unknown_entries(self):
        with pytest.raises(ConfigurationError):
            make_driver("cubic")
        with pytest.raises(ConfigurationError):
            make_terminal("state", scale=2.0)
        with pytest.raises(ConfigurationError):
            make_game_driver("roulette", [0.0], [0.0])

    def test_payoff_shape(self):
        with pytest.raises(ConfigurationError):
            make_game_driver("matrix", [0.0, 1.0], [0.0], payoff=[[1.0, 2.0]])
        driver = make_game_driver("matrix", [0.0, 1.0], [0.0], payoff=[[1.0], [-2.0]], discount=0.5)
        a, f0 = driver(0.0, 0.0, 1.0, 0.0)
        assert (float(a), float(f0)) == (-0.5, -2.0)
        assert driver.source_bound == 2.0
