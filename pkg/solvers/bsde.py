"""
仿射生成元 BSDE 的概率表示

生成元 f(s, y, z) = a_s·y + β_s·z + f0_s 时
    Y_t = E[Γ_T·ξ + ∫_t^T Γ_s f0_s ds]
    Γ_s = exp(∫_t^s a dr + ∫_t^s β·dW − ½∫_t^s |β|² dr)
z 项经 Girsanov 变换吸收进权重，a 项为折现。离散化采用左端点规则。
"""

from typing import Optional

import numpy as np


def affine_weights(dt: np.ndarray, a: np.ndarray, beta: Optional[np.ndarray] = None,
                   dW: Optional[np.ndarray] = None) -> np.ndarray:
    """
    各网格时刻的权重 Γ_k

    :param dt: (K,) 时间步长
    :param a: (n, K) y 系数
    :param beta: (n, K, m) z 系数，可缺省
    :param dW: (n, K, m) 驱动布朗运动增量，beta 给出时必需
    :return: (n, K+1)，Γ_0 = 1
    """
    log_increment = a * dt[None, :]
    if beta is not None:
        log_increment = log_increment + np.einsum("nkm,nkm->nk", beta, dW) \
            - 0.5 * np.einsum("nkm,nkm->nk", beta, beta) * dt[None, :]
    n = a.shape[0]
    log_weight = np.concatenate([np.zeros((n, 1)), np.cumsum(log_increment, axis=1)], axis=1)
    return np.exp(log_weight)


def affine_bsde_samples(dt: np.ndarray, terminal: np.ndarray, a: np.ndarray, f0: np.ndarray,
                        beta: Optional[np.ndarray] = None, dW: Optional[np.ndarray] = None) -> np.ndarray:
    """
    逐样本的 Γ_T·ξ + Σ_k Γ_k f0_k Δt_k

    :param terminal: (n,) 终端值
    :param a: (n, K) y 系数
    :param f0: (n, K) 源项
    :return: (n,) 其均值为 Y_t 的估计
    """
    weights = affine_weights(dt, a, beta, dW)
    running = np.sum(weights[:, :-1] * f0 * dt[None, :], axis=1)
    return weights[:, -1] * terminal + running
