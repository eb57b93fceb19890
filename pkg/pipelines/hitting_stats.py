"""
锥命中时间的统计检验

- 尾概率 P(H_n^ε < T)（Wiener 测度）与 C/(nε²) 的比较
- 命中时间关于 (x, R) 的正则性，Ē^L 在控制族上估计
- 小时间界 sup_P P(H^{0,0,R} < δ) ≤ C_R·δ
- 时间平移正则性 Ē^L|H^{0,x,R} − H^{τ,x,R}| ≤ C·√τ
- 变体命中时间的夹逼 Ĥ_{ε1} ≤ H^{0,0,ε} ≤ Ĥ_ε

批量版本在统一网格上用 batch_first_crossing；夹逼检查用标量精确求解。
"""

import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from core.hitting import (
    ConeSpec, batch_first_crossing, batch_hitting_sequence, hitting_time, hitting_variants, values_at,
)
from solvers.nonlinear_expectation import (
    MeasureFamilySpec, chunk_normals, default_family, derive_seed, simulate_controlled, upper_expectation,
    wiener_law,
)
from utils.errors import ConfigurationError, PreconditionError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="pipelines.hitting_stats")


def _wiener_counts(epsilon: float, L1: float, T: float, samples: int, seed: int, step: Optional[float],
                   pool: WorkerPool) -> np.ndarray:
    """每条 Wiener 路径在 [0, T) 内的侧面命中次数"""
    spec = MeasureFamilySpec(L=0.5, d=1, T=T, step=step)
    grid = spec.grid

    def run(chunk):
        index, lo, hi = chunk
        normals = chunk_normals(seed, index, hi - lo, grid.shape[0] - 1, 1)
        W = np.concatenate([np.zeros((hi - lo, 1, 1)), np.cumsum(normals * np.sqrt(np.diff(grid))[None, :, None],
                                                                   axis=1)], axis=1)
        seq = batch_hitting_sequence(grid, W, epsilon, L1)
        if not np.all(seq.knot_times[:, -1] >= T):
            raise RuntimeError("存在未到达终端的命中序列")
        return seq.counts

    return np.concatenate(pool.map_ordered(run, pool.chunks(samples)))


def tail_probabilities(epsilon: float, L1: float, T: float = 1.0, n_max: int = 20, samples: int = 10_000,
                       seed: int = 0, step: Optional[float] = None, pool: Optional[WorkerPool] = None) -> dict:
    """
    Wiener 测度下的尾概率 p_n = P(H_n^ε < T)，n = 1..n_max

    常数按一阶矩拟合：ĉ = ε²·E[N]，N 为 [0, T) 内的侧面命中次数，于是 ĉ/(nε²) = E[N]/n。
    检查 p_n 单调不增且 p_n ≤ ĉ/(nε²)；ĉ 随 ε 变化保持有界即尾界的常数与 ε 无关。
    只在 n = 1 处拟合的常数 ε²·p_1 作为诊断一并报告（前 ⌊L1·T/ε⌋ 次命中纯时钟就会发生，
    该拟合在 n ≥ 2 上必然越界）。
    """
    if not epsilon > 0 or not L1 > 0:
        raise ConfigurationError(f"需要 ε > 0 且 L1 > 0: ε={epsilon}, L1={L1}")
    pool = pool or serial_pool()
    counts = _wiener_counts(epsilon, L1, T, samples, seed, step, pool)
    n = np.arange(1, n_max + 1)
    p = np.array([float(np.mean(counts >= k)) for k in n])
    stderr = np.sqrt(p * (1.0 - p) / samples)
    mean_count = float(np.mean(counts))
    c_hat = epsilon ** 2 * mean_count
    bound = c_hat / (n * epsilon ** 2)
    within = p <= bound + 3.0 * stderr + 1e-12
    monotone = bool(np.all(np.diff(p) <= 1e-12))
    c_first = epsilon ** 2 * p[0]
    first_fit_violations = int(np.sum(p > c_first / (n * epsilon ** 2) + 1e-12))
    table = pd.DataFrame({"n": n, "probability": p, "stderr": stderr, "bound": bound, "within": within})
    success = monotone and bool(np.all(within))
    if not success:
        logger.warning(f"尾概率检查失败: ε={epsilon}, 单调={monotone}, 越界 n={n[~within].tolist()}")
    logger.info(f"尾概率: ε={epsilon}, L1={L1}, 样本 {samples}, ĉ={c_hat:.4g}, 最大命中次数 {int(counts.max())}")
    return {"success": success, "epsilon": epsilon, "L1": L1, "T": T, "c_hat": c_hat, "mean_count": mean_count,
            "c_first": c_first, "first_fit_violations": first_fit_violations, "monotone": monotone,
            "max_count": int(counts.max()), "all_terminated": True, "table": table}


def _first_hit(grid: np.ndarray, paths: np.ndarray, x: float, R: float, L1: float, start: float = 0.0) -> np.ndarray:
    """|x + X_s − X_start| + L1(s − start) ≥ R 的首次时间（start 为网格内时刻）"""
    n = paths.shape[0]
    start_arr = np.full(n, float(start))
    base = values_at(grid, paths, start_arr) if start > grid[0] else paths[:, 0, :]
    c = float(x) - base
    hit, _ = batch_first_crossing(grid, paths, start_arr, c, np.full(n, R + L1 * start), L1)
    return hit


def _family_spec(L: float, T: float, step: Optional[float]) -> MeasureFamilySpec:
    return MeasureFamilySpec(L=L, d=1, T=T, step=step)


def regularity_check(L: float, L1: float, T: float = 1.0, pairs: int = 20, samples: int = 10_000, seed: int = 0,
                     step: Optional[float] = None, family=None, pool: Optional[WorkerPool] = None) -> dict:
    """
    Ē^L[|H^{0,x1,R1} − H^{0,x2,R2}|] ≤ |x1 − x2| + |R1 − R2| + 3·stderr

    (x_i, R_i) 随机取样，R ∈ [0.2, 0.6]，|x| < R/2。缺省控制族为 8 段分段常数族（坐标上升搜索）。
    """
    spec = _family_spec(L, T, step)
    family = family or default_family(L)
    rng = np.random.default_rng(derive_seed(seed, "regularity"))
    rows = []
    for k in range(pairs):
        R1, R2 = rng.uniform(0.2, 0.6, size=2)
        x1 = rng.uniform(-0.5, 0.5) * R1
        x2 = rng.uniform(-0.5, 0.5) * R2

        def gap(times, values, x1=x1, R1=R1, x2=x2, R2=R2):
            return np.abs(_first_hit(times, values, x1, R1, L1) - _first_hit(times, values, x2, R2, L1))

        est = upper_expectation(gap, spec, family, samples, seed, pool)
        bound = abs(x1 - x2) + abs(R1 - R2)
        rows.append({"pair": k, "x1": x1, "R1": R1, "x2": x2, "R2": R2, "estimate": est.value,
                     "stderr": est.stderr, "bound": bound, "ok": est.value <= bound + 3.0 * est.stderr,
                     "argmax": est.argmax})
    table = pd.DataFrame(rows)
    success = bool(table["ok"].all())
    if not success:
        logger.warning(f"正则性检查有 {int((~table['ok']).sum())} 对越界")
    return {"success": success, "pairs": pairs, "table": table}


def small_time_check(R: float, L: float, L1: float, deltas: Optional[Sequence[float]] = None, samples: int = 10_000,
                     seed: int = 0, step: Optional[float] = None, family=None,
                     pool: Optional[WorkerPool] = None) -> dict:
    """
    sup_P P(H^{0,0,R} < δ) ≤ C_R·δ，C_R 在最大的 δ 处拟合

    δ 默认取 (0.125, 0.25, 0.5)·R/L1，均早于纯时钟出口 R/L1。
    """
    if deltas is None:
        deltas = [f * R / L1 for f in (0.125, 0.25, 0.5)]
    deltas = sorted(float(d) for d in deltas)
    T = max(deltas) * 1.5
    spec = _family_spec(L, T, step)
    family = family or default_family(L)
    rows = []
    for delta in deltas:
        def early(times, values, delta=delta):
            return (_first_hit(times, values, 0.0, R, L1) < delta).astype(float)

        est = upper_expectation(early, spec, family, samples, seed, pool)
        rows.append({"delta": delta, "probability": est.value, "stderr": est.stderr, "argmax": est.argmax})
    C_R = rows[-1]["probability"] / deltas[-1]
    for row in rows:
        row["bound"] = C_R * row["delta"]
        row["ok"] = row["probability"] <= row["bound"] + 3.0 * row["stderr"] + 1e-12
    table = pd.DataFrame(rows)
    return {"success": bool(table["ok"].all()), "R": R, "C_R": C_R, "table": table}


def time_regularity_check(epsilon: float, L: float, L1: float, T: float = 1.0, taus: Optional[Sequence[float]] = None,
                          x: float = 0.0, samples: int = 10_000, seed: int = 0, step: Optional[float] = None,
                          family=None, pool: Optional[WorkerPool] = None) -> dict:
    """
    时间平移正则性：Ē^L[|H^{0,x,ε}(B) − H^{τ,x,ε}(B − B_τ)|] ≤ C·√τ

    C 在最大的 τ 处拟合，再在较小的 τ 上验证。
    """
    if abs(x) >= epsilon:
        raise PreconditionError(f"需要 |x| < ε: x={x}, ε={epsilon}")
    if taus is None:
        taus = [f * epsilon / L1 for f in (0.01, 0.04, 0.16)]
    taus = sorted(float(t) for t in taus)
    spec = _family_spec(L, T, step)
    family = family or default_family(L)
    rows = []
    for tau in taus:
        def shift(times, values, tau=tau):
            return np.abs(_first_hit(times, values, x, epsilon, L1) - _first_hit(times, values, x, epsilon, L1, tau))

        est = upper_expectation(shift, spec, family, samples, seed, pool)
        rows.append({"tau": tau, "estimate": est.value, "stderr": est.stderr, "argmax": est.argmax})
    C = rows[-1]["estimate"] / math.sqrt(taus[-1])
    for row in rows:
        row["bound"] = C * math.sqrt(row["tau"])
        row["ok"] = row["estimate"] <= row["bound"] + 3.0 * row["stderr"] + 1e-12
    table = pd.DataFrame(rows)
    return {"success": bool(table["ok"].all()), "C": C, "table": table}


def variant_ordering_check(epsilon: float, L1: float, T: float = 1.0, samples: int = 100, seed: int = 0,
                           step: Optional[float] = None, eps1_fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> dict:
    """
    Ĥ_{ε1} ≤ H^{0,0,ε} ≤ Ĥ_ε 在 Wiener 样本路径上逐条检查

    ε1 = f·ε·min(1, 1/L1)/2 在 f 上扫描，报告夹逼成立的最大 ε1。右半边要求 L1 ≥ 1。
    """
    if L1 < 1:
        raise PreconditionError(f"夹逼的右半边需要 L1 >= 1: L1={L1}")
    spec = MeasureFamilySpec(L=0.5, d=1, T=T, step=step)
    paths = simulate_controlled(wiener_law(), spec, seed, samples)
    cone = ConeSpec(0.0, epsilon, L1, T)
    base_eps1 = epsilon * min(1.0, 1.0 / L1) / 2.0
    hits = np.array([hitting_time(p, 0.0, [0.0], cone).time for p in paths])
    variants = np.array([hitting_variants(p, 0.0, epsilon, T) for p in paths])
    h_hat, h_star = variants[:, 0], variants[:, 1]
    upper_ok = bool(np.all(hits <= h_hat + 1e-12))
    rows = []
    for fraction in eps1_fractions:
        eps1 = fraction * base_eps1
        low = np.array([hitting_variants(p, 0.0, eps1, T)[0] for p in paths])
        rows.append({"fraction": fraction, "eps1": eps1, "violations": int(np.sum(low > hits + 1e-12))})
    table = pd.DataFrame(rows)
    holding = table[table["violations"] == 0]
    eps1_max = float(holding["eps1"].max()) if len(holding) else None
    success = upper_ok and eps1_max is not None and eps1_max >= base_eps1
    return {"success": success, "epsilon": epsilon, "upper_ok": upper_ok, "eps1_max": eps1_max,
            "h_mean": float(hits.mean()), "h_hat_mean": float(h_hat.mean()), "h_star_mean": float(h_star.mean()),
            "table": table}
