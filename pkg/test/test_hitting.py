import numpy as np
import pytest

from core.hitting import (
    INTERIOR, LATERAL, OUTSIDE, TERMINAL, ConeSpec, batch_hitting_sequence, cone_classify, frozen_values,
    hitting_sequence, hitting_time, hitting_variants, markov_restart_check, partition_state,
)
from core.paths import SampledPath, interpolate_partition
from utils.errors import ConfigurationError, DomainError, PreconditionError


def sawtooth(slope=2.0, period=0.2, T=1.0):
    """斜率 ±slope 的锯齿折线"""
    times = np.arange(0.0, T + 1e-12, period / 2)
    values = np.where(np.arange(times.shape[0]) % 2 == 0, 0.0, slope * period / 2)
    return SampledPath(times=times, values=values, t_end=T)


def scan_exit(path, t, x, R, L1, T, step=1e-5):
    grid = np.arange(t, T, step)
    dist = np.abs(x + path.sample(grid)[:, 0] - path.value_at(t)[0]) + L1 * (grid - t)
    crossed = np.flatnonzero(dist >= R)
    return grid[crossed[0]] if crossed.size else T


class TestConeSpec:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            ConeSpec(0.0, 0.0, 1.0, 1.0)
        with pytest.raises(ConfigurationError):
            ConeSpec(0.0, 0.5, 0.5, 1.0)
        with pytest.raises(ConfigurationError):
            ConeSpec(1.0, 0.5, 1.0, 1.0)

    def test_top_time(self):
        assert ConeSpec(0.0, 0.5, 1.0, 1.0).top_time == 0.5
        assert ConeSpec(0.0, 0.5, 1.0, 0.2).top_time == 0.2


class TestHittingTime:
    def test_zero_path_clock_exit(self):
        result = hitting_time(SampledPath.zero(0.0, 1.0), 0.0, [0.0], ConeSpec(0.0, 0.3, 1.0, 1.0))
        assert result.time == 0.3
        assert not result.is_terminal

    def test_zero_path_clamped_at_horizon(self):
        result = hitting_time(SampledPath.zero(0.0, 1.0), 0.0, [0.0], ConeSpec(0.0, 2.0, 1.0, 1.0))
        assert result.time == 1.0
        assert result.is_terminal

    def test_boundary_start_exits_immediately(self):
        result = hitting_time(SampledPath.zero(0.0, 1.0), 0.2, [0.4], ConeSpec(0.0, 0.4, 1.0, 1.0))
        assert result.time == 0.2
        assert not result.is_terminal

    def test_unit_slope_path(self):
        path = SampledPath.from_knots([(0.0, 0.0), (1.0, 1.0)])
        result = hitting_time(path, 0.0, [0.0], ConeSpec(0.0, 0.5, 1.0, 1.0))
        assert result.time == pytest.approx(0.25, abs=1e-15)

    def test_sawtooth_matches_dense_scan(self):
        path = sawtooth()
        for x in (0.0, 0.1, -0.2):
            result = hitting_time(path, 0.0, [x], ConeSpec(0.0, 0.5, 2.0, 1.0))
            assert result.time == pytest.approx(scan_exit(path, 0.0, x, 0.5, 2.0, 1.0), abs=2e-5)

    def test_start_outside_cone(self):
        with pytest.raises(PreconditionError):
            hitting_time(SampledPath.zero(0.0, 1.0), 0.0, [0.6], ConeSpec(0.0, 0.5, 1.0, 1.0))

    def test_path_must_cover_horizon(self):
        with pytest.raises(DomainError):
            hitting_time(SampledPath.zero(0.0, 0.5), 0.0, [0.0], ConeSpec(0.0, 2.0, 1.0, 1.0))

    def test_monotone_in_radius(self, walk):
        path = walk()
        times = [hitting_time(path, 0.0, [0.05], ConeSpec(0.0, R, 1.5, 1.0)).time for R in (0.1, 0.2, 0.4, 0.8)]
        assert all(b >= a for a, b in zip(times, times[1:]))


class TestMarkovRestart:
    def test_identity_restart(self, walk):
        assert markov_restart_check(walk(), 0.0, [0.0], ConeSpec(0.0, 0.4, 1.5, 1.0), 0.0)

    def test_zero_path_half_way(self):
        spec = ConeSpec(0.0, 0.3, 1.0, 1.0)
        assert markov_restart_check(SampledPath.zero(0.0, 1.0), 0.0, [0.0], spec, 0.15)

    def test_random_paths_are_exact(self, walk, rng):
        for _ in range(100):
            path = walk()
            spec = ConeSpec(0.0, float(rng.uniform(0.1, 0.6)), 1.5, 1.0)
            x = float(rng.uniform(-0.5, 0.5)) * spec.radius
            hit = hitting_time(path, 0.0, [x], spec).time
            assert markov_restart_check(path, 0.0, [x], spec, float(rng.uniform(0.0, hit)))

    def test_tau_after_hit(self):
        spec = ConeSpec(0.0, 0.3, 1.0, 1.0)
        with pytest.raises(PreconditionError):
            markov_restart_check(SampledPath.zero(0.0, 1.0), 0.0, [0.0], spec, 0.5)


class TestHittingSequence:
    def test_zero_path_clock_only(self):
        pi = hitting_sequence(SampledPath.zero(0.0, 1.0), 0.3, 1.0)
        assert len(pi) == 3
        assert pi.times == pytest.approx([0.3, 0.6, 0.9])
        assert np.all(pi.increments == 0.0)
        assert pi.terminal

    def test_lateral_exits_satisfy_cone_equation(self, walk):
        pi = hitting_sequence(walk(), 0.2, 1.5)
        previous = 0.0
        for p in pi.points:
            assert abs(p.increment[0]) + 1.5 * (p.time - previous) == pytest.approx(0.2, abs=1e-9)
            previous = p.time
        assert pi.terminal

    def test_interpolation_reproduces_path_at_hits(self, walk):
        path = walk()
        pi = hitting_sequence(path, 0.25, 1.5)
        frozen = interpolate_partition(pi, 0.0, 1.0)
        for t in pi.times:
            assert frozen.value_at(t)[0] == pytest.approx(path.value_at(t)[0], abs=1e-12)

    def test_partition_state(self, walk):
        path = walk()
        full = hitting_sequence(path, 0.25, 1.5)
        t = 0.7
        pi, x_bar = partition_state(path, t, 0.25, 1.5)
        assert len(pi) == int(np.sum(full.times <= t))
        assert x_bar[0] == pytest.approx(path.value_at(t)[0] - path.value_at(pi.last_time())[0])

    def test_partition_state_includes_hit_at_t(self):
        # 零路径、L1 = 2：纯时钟出口在 0.125, 0.25, ...
        path = SampledPath.zero(0.0, 1.0)
        pi, x_bar = partition_state(path, 0.25, 0.25, 2.0)
        assert list(pi.times) == [0.125, 0.25]
        assert x_bar[0] == 0.0
        before, _ = partition_state(path, 0.24, 0.25, 2.0)
        assert list(before.times) == [0.125]

    def test_partition_state_at_horizon_excludes_terminal(self):
        path = SampledPath.zero(0.0, 0.3)
        pi, _ = partition_state(path, 0.3, 0.25, 2.0)
        assert list(pi.times) == [0.125, 0.25]


class TestConeClassify:
    spec = ConeSpec(0.0, 0.5, 1.0, 1.0)

    def test_apex_is_interior(self):
        assert cone_classify(self.spec, 0.0, [0.0]) == INTERIOR

    def test_lateral(self):
        assert cone_classify(self.spec, 0.25, [0.25]) == LATERAL

    def test_outside(self):
        assert cone_classify(self.spec, 0.25, [0.4]) == OUTSIDE

    def test_terminal(self):
        spec = ConeSpec(0.0, 2.0, 1.0, 1.0)
        assert cone_classify(spec, 1.0, [0.0]) == TERMINAL


class TestVariants:
    def test_zero_path(self):
        h_hat, h_star = hitting_variants(SampledPath.zero(0.0, 1.0), 0.0, 0.3)
        assert h_hat == 0.3
        assert h_star == pytest.approx(0.3)

    def test_ordering_on_random_paths(self, walk):
        for _ in range(20):
            path = walk(steps=200)
            hit = hitting_time(path, 0.0, [0.0], ConeSpec(0.0, 0.4, 1.5, 1.0)).time
            h_hat, _ = hitting_variants(path, 0.0, 0.4)
            low, _ = hitting_variants(path, 0.0, 0.4 / 1.5 / 2)
            assert low <= hit <= h_hat


class TestBatch:
    def test_batch_sequence_agrees_with_scalar(self, walk):
        paths = [walk(steps=100) for _ in range(8)]
        grid = paths[0].times
        stacked = np.stack([p.values for p in paths], axis=0)
        batch = batch_hitting_sequence(grid, stacked, 0.25, 1.5)
        for i, path in enumerate(paths):
            pi = hitting_sequence(path, 0.25, 1.5)
            assert batch.counts[i] == len(pi)
            assert batch.knot_times[i, 1:len(pi) + 1] == pytest.approx(pi.times, abs=1e-9)

    def test_frozen_values_take_last_hit(self):
        grid = np.linspace(0.0, 1.0, 11)
        knot_times = np.array([[0.0, 0.35, 1.0]])
        knot_values = np.array([[[0.0], [0.2], [0.1]]])
        out = frozen_values(grid, knot_times, knot_values)
        assert out[0, 3, 0] == 0.0
        assert out[0, 4, 0] == 0.2
        assert out[0, -1, 0] == 0.1
