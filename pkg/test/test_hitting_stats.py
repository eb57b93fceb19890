import pytest

from pipelines.hitting_stats import (
    regularity_check, small_time_check, tail_probabilities, time_regularity_check, variant_ordering_check,
)
from solvers.nonlinear_expectation import constant_family, default_family, family_by_name
from utils.errors import ConfigurationError, PreconditionError


class TestTailProbabilities:
    def test_monotone_and_bounded(self, pool):
        report = tail_probabilities(0.4, 1.5, n_max=10, samples=500, seed=1, step=0.005, pool=pool)
        assert report["success"]
        assert report["all_terminated"]
        table = report["table"]
        assert list(table["n"]) == list(range(1, 11))
        # 前三次命中纯时钟也会发生
        assert list(table["probability"].iloc[:3]) == [1.0, 1.0, 1.0]
        assert report["c_hat"] == pytest.approx(0.16 * report["mean_count"])
        # 只在 n = 1 处拟合的常数在 n = 2 就越界
        assert report["first_fit_violations"] > 0

    def test_constant_does_not_grow_as_cones_shrink(self, pool):
        coarse = tail_probabilities(0.4, 1.5, n_max=5, samples=300, seed=6, step=0.005, pool=pool)
        fine = tail_probabilities(0.2, 1.5, n_max=5, samples=300, seed=6, step=0.005, pool=pool)
        assert fine["c_hat"] <= 2.0 * coarse["c_hat"]

    def test_more_hits_with_smaller_cones(self, pool):
        wide = tail_probabilities(0.5, 1.5, n_max=3, samples=200, seed=2, step=0.01, pool=pool)
        narrow = tail_probabilities(0.2, 1.5, n_max=3, samples=200, seed=2, step=0.01, pool=pool)
        assert narrow["max_count"] > wide["max_count"]

    def test_worker_count_does_not_matter(self, pool, threaded_pool):
        serial = tail_probabilities(0.4, 1.5, n_max=5, samples=300, seed=3, step=0.01, pool=pool)
        threaded = tail_probabilities(0.4, 1.5, n_max=5, samples=300, seed=3, step=0.01, pool=threaded_pool)
        assert serial["table"].equals(threaded["table"])

    def test_invalid(self, pool):
        with pytest.raises(ConfigurationError):
            tail_probabilities(0.0, 1.5, pool=pool)


class TestVariantOrdering:
    def test_sandwich(self):
        report = variant_ordering_check(0.4, 1.5, samples=20, seed=4, step=0.01)
        assert report["success"]
        assert report["upper_ok"]
        assert report["h_hat_mean"] >= report["h_mean"]

    def test_needs_unit_slope(self):
        with pytest.raises(PreconditionError):
            variant_ordering_check(0.4, 0.5)


class TestSmallTime:
    def test_probability_grows_with_delta(self, pool):
        # 常数族穷举，公共随机数下概率随 δ 单调
        report = small_time_check(0.5, 0.5, 1.5, samples=300, seed=5, step=0.005, family=constant_family(0.5),
                                  pool=pool)
        probabilities = list(report["table"]["probability"])
        assert probabilities == sorted(probabilities)
        assert bool(report["table"]["ok"].iloc[-1])


class TestTimeRegularity:
    def test_start_inside_cone(self, pool):
        with pytest.raises(PreconditionError):
            time_regularity_check(0.3, 0.5, 1.5, x=0.3, pool=pool)


@pytest.mark.slow
class TestRegularity:
    def test_lipschitz_in_start_and_radius(self, pool):
        report = regularity_check(0.5, 1.5, pairs=3, samples=500, seed=0, step=0.01, pool=pool)
        assert report["success"]
        assert len(report["table"]) == 3
        assert report["table"]["argmax"].str.len().gt(0).all()

    def test_piecewise_family_dominates_constant(self, pool):
        kwargs = {"pairs": 2, "samples": 200, "seed": 4, "step": 0.02, "pool": pool}
        piecewise = regularity_check(0.5, 1.5, **kwargs)["table"]
        constant = regularity_check(0.5, 1.5, family=constant_family(0.5), **kwargs)["table"]
        # 分段搜索覆盖全部常数控制与反馈控制
        assert (piecewise["estimate"] >= constant["estimate"] - 1e-12).all()
        assert list(piecewise["bound"]) == list(constant["bound"])


class TestFamilyByName:
    def test_kinds(self):
        assert family_by_name("constant", 0.5).intervals == 1
        assert family_by_name("default", 0.5).intervals == default_family(0.5).intervals == 8

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            family_by_name("bang-bang", 0.5)
