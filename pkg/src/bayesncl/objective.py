"""Contrastive alignment, Bernoulli KL sparsity and their weighted sum.

Graph-level builders (``*_node``) take and return node ids so the trainer can
differentiate them; the plain functions wrap them for numpy inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndcore import Graph


@dataclass(frozen=True)
class SimilarityConfig:
    tau: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")


@dataclass(frozen=True)
class LossBreakdown:
    align: float
    sparsity: float
    lam: float
    total: float


def info_nce_node(g: Graph, a: int, p: int, cfg: SimilarityConfig) -> int:
    """Mean over anchors of ``-s_pos + logsumexp(s_pos, s_neg...)``.

    Negatives for anchor ``i`` are the other anchors ``j != i``.  The logits
    matrix carries ``s(a_i, p_i)`` on its diagonal and ``s(a_i, a_j)`` off it.
    """
    n = g.value(a).shape[0]
    if n < 2:
        raise ValueError(f"info_nce needs n >= 2 anchors, got {n}")
    if g.value(p).shape != g.value(a).shape:
        raise ValueError(f"anchor/positive shapes differ: {g.value(a).shape} vs {g.value(p).shape}")
    if cfg.normalize:
        a = g.l2_normalize_rows(a)
        p = g.l2_normalize_rows(p)
    s_ap = g.scale(g.matmul(a, p, trans_b=True), 1.0 / cfg.tau)
    s_aa = g.scale(g.matmul(a, a, trans_b=True), 1.0 / cfg.tau)
    eye = g.const(np.eye(n))
    off = g.const(1.0 - np.eye(n))
    diag = g.mul(eye, s_ap)
    logits = g.add(diag, g.mul(off, s_aa))
    return g.mean_all(g.sub(g.logsumexp_rows(logits), g.row_sum(diag)))


def info_nce(anchors, positives, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    g = Graph()
    return float(g.value(info_nce_node(g, g.const(anchors), g.const(positives), cfg))[0, 0])


def softplus_node(g: Graph, u: int) -> int:
    """``log(1 + exp(u))`` as ``relu(u) + log(1 + exp(-|u|))``; finite for any u."""
    ones = g.const(np.ones_like(g.value(u)))
    absu = g.add(g.relu(u), g.relu(g.neg(u)))
    return g.add(g.relu(u), g.log(g.add(ones, g.exp(g.neg(absu)))))


def bernoulli_kl_node(g: Graph, alpha: int, rho: float, logits: int | None = None) -> int:
    """Batch mean of ``sum_k KL(Bern(alpha_k) || Bern(rho))``.

    With the gate ``logits`` node the log-probabilities come from
    ``log a = u - softplus(u)`` and ``log(1-a) = -softplus(u)``, which stay
    finite when the sigmoid saturates to exactly 0 or 1.
    """
    _check_rho(rho)
    av = g.value(alpha)
    K = av.shape[1]
    one = g.const(np.ones_like(av))
    oma = g.sub(one, alpha)
    if logits is None:
        log_a, log_oma = g.log(alpha), g.log(oma)
    else:
        sp = softplus_node(g, logits)
        log_a, log_oma = g.sub(logits, sp), g.neg(sp)
    t1 = g.mul(alpha, g.sub(log_a, g.const(np.full_like(av, math.log(rho)))))
    t2 = g.mul(oma, g.sub(log_oma, g.const(np.full_like(av, math.log1p(-rho)))))
    return g.scale(g.mean_all(g.add(t1, t2)), float(K))


def bernoulli_kl(alpha, rho: float) -> float:
    g = Graph()
    return float(g.value(bernoulli_kl_node(g, g.const(alpha), rho))[0, 0])


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"prior rho must lie in (0, 1), got {rho}")


def masked_info_nce_node(g: Graph, fwd_a, fwd_p, cfg: SimilarityConfig) -> int:
    """InfoNCE on the gated features of both views (one mask sample each)."""
    return info_nce_node(g, fwd_a.z_gated, fwd_p.z_gated, cfg)


def total_loss_node(
    g: Graph, fwd_a, fwd_p, cfg: SimilarityConfig, lam: float, rho: float,
    symmetric_kl: bool = False,
) -> tuple[int, int, int | None, LossBreakdown]:
    """Build ``align + lam * sparsity``; returns (total, align, sparsity, breakdown).

    Without a gate (``alpha`` absent) the sparsity term is 0 and total is align.
    """
    _check_rho(rho)
    align = masked_info_nce_node(g, fwd_a, fwd_p, cfg)
    a_val = float(g.value(align)[0, 0])
    if fwd_a.alpha is None:
        return align, align, None, LossBreakdown(a_val, 0.0, lam, a_val)
    sp = bernoulli_kl_node(g, fwd_a.alpha, rho, fwd_a.logits)
    if symmetric_kl:
        sp = g.scale(g.add(sp, bernoulli_kl_node(g, fwd_p.alpha, rho, fwd_p.logits)), 0.5)
    total = g.add(align, g.scale(sp, lam))
    s_val = float(g.value(sp)[0, 0])
    return total, align, sp, LossBreakdown(a_val, s_val, lam, float(g.value(total)[0, 0]))


def ipw_similarity(z, z_prime, pi) -> float:
    """``sum_k z_k z'_k / pi_k``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    zp = np.asarray(z_prime, dtype=np.float64).ravel()
    pi = np.asarray(pi, dtype=np.float64).ravel()
    if not (z.shape == zp.shape == pi.shape):
        raise ValueError(f"length mismatch: {z.shape}, {zp.shape}, {pi.shape}")
    if np.any(pi <= 0) or np.any(pi > 1):
        raise ValueError("prevalence entries must lie in (0, 1]")
    return float(np.sum(z * zp / pi))


def ipw_similarity_matrix(Z, Zp, pi) -> np.ndarray:
    """Row-wise ``ipw_similarity`` for aligned pair arrays (n x K each)."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0) or np.any(pi > 1):
        raise ValueError("prevalence entries must lie in (0, 1]")
    return (np.asarray(Z) * np.asarray(Zp) / pi).sum(axis=1)
