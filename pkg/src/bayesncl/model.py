"""Encoder, gating head and mask strategies.

Parameters live in one flat ``dict[str, ndarray]`` keyed ``enc.<i>.W``,
``enc.<i>.b``, ``gate.<i>.W`` and ``gate.<i>.b``.  Biases are ``1 x width``
rows and enter the graph as ``ones(n,1) @ b`` (no op broadcasts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ndcore import Graph, sigmoid

MASK_KINDS = ("ste", "gumbel_sigmoid", "soft", "topk", "none")


@dataclass(frozen=True)
class MaskStrategy:
    kind: str = "ste"
    temperature: float = 1.0
    topk_ratio: float = 0.8

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; expected one of {MASK_KINDS}")
        if self.temperature <= 0:
            raise ValueError(f"gumbel temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.topk_ratio <= 1.0:
            raise ValueError(f"topk ratio must lie in [0, 1], got {self.topk_ratio}")

    @property
    def gated(self) -> bool:
        return self.kind in ("ste", "gumbel_sigmoid", "soft")


@dataclass(frozen=True)
class ModelSpec:
    d: int
    K: int
    hidden: tuple[int, ...] = (64,)
    nonneg: bool = True
    gate_depth: int = 2
    detach: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.gate_depth not in (1, 2, 3):
            raise ValueError(f"gate depth must be 1, 2 or 3, got {self.gate_depth}")

    @property
    def encoder_dims(self) -> list[int]:
        return [self.d, *self.hidden, self.K]


@dataclass
class ForwardOut:
    """Node ids of one forward pass plus their values."""

    graph: Graph
    z: int
    z_gated: int
    alpha: Optional[int] = None
    logits: Optional[int] = None
    m_train: Optional[int] = None
    m_hard: Optional[np.ndarray] = None

    def val(self, name: str) -> np.ndarray:
        if name == "m_hard":
            return self.m_hard
        nid = getattr(self, name)
        return None if nid is None else self.graph.value(nid)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(spec: ModelSpec, rng: np.random.Generator, with_gate: bool = True,
                gate_bias: float = 0.0) -> dict[str, np.ndarray]:
    """Xavier weights, zero biases; the gate's output bias starts at ``gate_bias``."""
    params: dict[str, np.ndarray] = {}
    dims = spec.encoder_dims
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"enc.{i}.W"] = xavier(rng, a, b)
        params[f"enc.{i}.b"] = np.zeros((1, b))
    if with_gate:
        for i in range(spec.gate_depth):
            params[f"gate.{i}.W"] = xavier(rng, spec.K, spec.K)
            params[f"gate.{i}.b"] = np.zeros((1, spec.K))
        params[f"gate.{spec.gate_depth - 1}.b"][:] = gate_bias
    return params


def _layers(pids: dict[str, int], prefix: str) -> list[tuple[int, int]]:
    out = []
    i = 0
    while f"{prefix}.{i}.W" in pids:
        out.append((pids[f"{prefix}.{i}.W"], pids[f"{prefix}.{i}.b"]))
        i += 1
    return out


def _affine(g: Graph, x: int, W: int, b: int) -> int:
    n = g.value(x).shape[0]
    ones = g.const(np.ones((n, 1)))
    return g.add(g.matmul(x, W), g.matmul(ones, b))


def encode(g: Graph, pids: dict[str, int], X: int, nonneg: bool = True) -> int:
    """Affine+relu stack; the last layer is relu only when ``nonneg``."""
    layers = _layers(pids, "enc")
    if not layers:
        raise ValueError("encoder has no layers")
    h = X
    for i, (W, b) in enumerate(layers):
        h = _affine(g, h, W, b)
        if i < len(layers) - 1 or nonneg:
            h = g.relu(h)
    return h


def gate_logits(g: Graph, pids: dict[str, int], z: int, detach: bool = True) -> int:
    """Pre-sigmoid gate output ``MLP(z)``; hidden layers are relu."""
    layers = _layers(pids, "gate")
    if not layers:
        raise ValueError("gating head has no layers")
    h = g.stop_gradient(z) if detach else z
    for i, (W, b) in enumerate(layers):
        h = _affine(g, h, W, b)
        if i < len(layers) - 1:
            h = g.relu(h)
    return h


def gate_alpha(g: Graph, pids: dict[str, int], z: int, detach: bool = True) -> int:
    """Bernoulli keep-probabilities ``sigmoid(MLP(z))``."""
    return g.sigmoid(gate_logits(g, pids, z, detach))


def topk_mask(z: np.ndarray, ratio: float) -> np.ndarray:
    """Indicator of the ``round(ratio*K)`` largest entries per row; ties go to the lower index."""
    n, K = z.shape
    k = int(math.floor(ratio * K + 0.5))
    mask = np.zeros_like(z)
    if k == 0:
        return mask
    # stable sort on -z keeps lower indices first among equal values
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def make_mask(
    g: Graph,
    alpha: Optional[int],
    strategy: MaskStrategy,
    z: int,
    rng: Optional[np.random.Generator] = None,
    gumbel_noise: Optional[np.ndarray] = None,
    logits: Optional[int] = None,
) -> tuple[np.ndarray, int]:
    """Return ``(m_hard values, m_train node)``.

    ``gumbel_noise`` overrides the sampled ``g1 - g2`` difference (tests and
    replay); otherwise ``rng`` supplies it.  When the gate ``logits`` node is
    given, gumbel_sigmoid uses it directly instead of ``log(a) - log(1-a)``.
    """
    zval = g.value(z)
    kind = strategy.kind
    if kind == "none":
        ones = np.ones_like(zval)
        return ones, g.const(ones)
    if kind == "topk":
        m = topk_mask(zval, strategy.topk_ratio)
        return m, g.stop_gradient(g.const(m))
    a = g.value(alpha)
    if kind == "ste":
        m_hard = (a > 0.5).astype(np.float64)
        # forward value m_hard, identity Jacobian w.r.t. alpha
        m_train = g.add(g.stop_gradient(g.sub(g.const(m_hard), alpha)), alpha)
        return m_hard, m_train
    if kind == "soft":
        return a.copy(), alpha
    # gumbel_sigmoid: binary-concrete relaxation
    if gumbel_noise is None:
        if rng is None:
            raise ValueError("gumbel_sigmoid needs an rng or explicit noise")
        gumbel_noise = rng.gumbel(size=a.shape) - rng.gumbel(size=a.shape)
    if logits is not None:
        logit = logits
    else:
        ones = g.const(np.ones_like(a))
        logit = g.sub(g.log(alpha), g.log(g.sub(ones, alpha)))
    pre = g.scale(g.add(logit, g.const(gumbel_noise)), 1.0 / strategy.temperature)
    m_train = g.sigmoid(pre)
    m_hard = (g.value(m_train) > 0.5).astype(np.float64)
    return m_hard, m_train


def forward(
    g: Graph,
    pids: dict[str, int],
    spec: ModelSpec,
    strategy: MaskStrategy,
    X,
    rng: Optional[np.random.Generator] = None,
    gumbel_noise: Optional[np.ndarray] = None,
) -> ForwardOut:
    """encode -> gate -> mask -> ``z_gated = z * m_train``."""
    x = X if isinstance(X, int) else g.const(X)
    if g.value(x).shape[1] != spec.d:
        raise ValueError(f"input width {g.value(x).shape[1]} != model d={spec.d}")
    z = encode(g, pids, x, nonneg=spec.nonneg)
    return gate_features(g, pids, spec, strategy, z, rng=rng, gumbel_noise=gumbel_noise)


def gate_features(g, pids, spec: ModelSpec, strategy: MaskStrategy, z: int, rng=None, gumbel_noise=None) -> ForwardOut:
    """Everything after the encoder: gate, mask and ``z * m_train``."""
    if strategy.kind == "none":
        return ForwardOut(g, z=z, z_gated=z, m_hard=np.ones_like(g.value(z)))
    logits = alpha = None
    if strategy.gated:
        logits = gate_logits(g, pids, z, detach=spec.detach)
        alpha = g.sigmoid(logits)
    m_hard, m_train = make_mask(g, alpha, strategy, z, rng=rng, gumbel_noise=gumbel_noise, logits=logits)
    return ForwardOut(g, z=z, z_gated=g.mul(z, m_train), alpha=alpha, logits=logits,
                      m_train=m_train, m_hard=m_hard)


def method_name(spec: ModelSpec, strategy: MaskStrategy) -> str:
    """Row label used in result tables."""
    if not spec.nonneg:
        return "cl"
    return {
        "none": "ncl",
        "topk": "ncl_topk",
        "ste": "bayesncl_ste",
        "gumbel_sigmoid": "bayesncl_gs",
        "soft": "bayesncl_soft",
    }[strategy.kind]


def infer_numpy(params: dict[str, np.ndarray], spec: ModelSpec, strategy: MaskStrategy, X: np.ndarray,
                rng: Optional[np.random.Generator] = None, batch: int = 4096) -> dict[str, np.ndarray]:
    """Evaluation forward without a tape: returns z, alpha, m_hard, z_gated.

    For gumbel_sigmoid the hard mask at evaluation is the deterministic
    ``alpha > 0.5`` (the noise-free limit).
    """
    outs: dict[str, list] = {"z": [], "alpha": [], "m_hard": [], "z_gated": []}
    enc = []
    i = 0
    while f"enc.{i}.W" in params:
        enc.append((params[f"enc.{i}.W"], params[f"enc.{i}.b"]))
        i += 1
    gate = []
    i = 0
    while f"gate.{i}.W" in params:
        gate.append((params[f"gate.{i}.W"], params[f"gate.{i}.b"]))
        i += 1
    for s in range(0, X.shape[0], batch):
        h = X[s:s + batch]
        for li, (W, b) in enumerate(enc):
            h = h @ W + b
            if li < len(enc) - 1 or spec.nonneg:
                h = np.maximum(h, 0.0)
        z = h
        if strategy.kind == "none":
            a = None
            m = np.ones_like(z)
        elif strategy.kind == "topk":
            a = None
            m = topk_mask(z, strategy.topk_ratio)
        else:
            h = z
            for li, (W, b) in enumerate(gate):
                h = h @ W + b
                if li < len(gate) - 1:
                    h = np.maximum(h, 0.0)
            a = sigmoid(h)
            m = a.copy() if strategy.kind == "soft" else (a > 0.5).astype(np.float64)
        outs["z"].append(z)
        outs["alpha"].append(a if a is not None else np.ones_like(z))
        outs["m_hard"].append(m)
        outs["z_gated"].append(z * m)
    return {k: np.concatenate(v) for k, v in outs.items()}
