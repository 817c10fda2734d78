"""Optimizers, the seeded training loop, gradient statistics and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import datagen
from .evalmetrics import EPS, activation_frequency, activation_ratio, semantic_consistency
from .model import MaskStrategy, ModelSpec, forward, gate_features, infer_numpy, init_params
from .ndcore import Graph, backward
from .objective import LossBreakdown, SimilarityConfig, total_loss_node

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "align", "sparsity", "total", "act_ratio")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    steps_per_epoch: int = 20
    backbone_lr: float = 0.1
    gate_lr_scale: float = 0.25
    momentum: float = 0.9
    weight_decay: float = 0.0
    tau: float = 0.2
    normalize: bool = True
    lam: float = 3e-5
    rho: float = 0.8
    strategy: MaskStrategy = field(default_factory=MaskStrategy)
    optimizer: str = "sgd"
    trust_coef: float = 0.001
    symmetric_kl: bool = False
    seed: int = 0
    stats_every: int = 0
    eval_size: int = 1000
    gate_init_prob: float = 0.5

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = MaskStrategy(**self.strategy)
        for name in ("backbone_lr", "gate_lr_scale", "momentum", "weight_decay", "trust_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.optimizer not in ("sgd", "lars"):
            raise ValueError(f"optimizer must be 'sgd' or 'lars', got {self.optimizer!r}")
        if not 0.0 < self.gate_init_prob < 1.0:
            raise ValueError("gate_init_prob must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def gate_lr(self) -> float:
        return self.gate_lr_scale * self.backbone_lr

    @property
    def sim(self) -> SimilarityConfig:
        return SimilarityConfig(self.tau, self.normalize)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = asdict(self.strategy)
        return d


# optimizers -----------------------------------------------------------------

@dataclass
class OptState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _check_shapes(params, grads):
    for k, w in params.items():
        g = grads.get(k)
        if g is None or g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {None if g is None else g.shape}, expected {w.shape}")


def sgd_step(params, grads, state: OptState, lr, momentum=0.9, weight_decay=0.0):
    """``v <- momentum*v + g + wd*w``;  ``w <- w - lr*v``.

    ``lr`` may be a float or a per-parameter dict.  Returns new (params, state).
    """
    _check_shapes(params, grads)
    new_p, new_b = {}, {}
    for k, w in params.items():
        v = state.buffers.get(k)
        v = np.zeros_like(w) if v is None else v
        v = momentum * v + grads[k] + weight_decay * w
        rate = lr[k] if isinstance(lr, dict) else lr
        new_p[k] = w - rate * v
        new_b[k] = v
    return new_p, OptState(new_b, state.step + 1)


def lars_local_lr(w, g, trust_coef, weight_decay) -> float:
    wn = float(np.linalg.norm(w))
    if wn == 0.0:
        return 0.0
    return trust_coef * wn / (float(np.linalg.norm(g)) + weight_decay * wn + 1e-9)


def lars_step(params, grads, state: OptState, lr, trust_coef=0.001, momentum=0.9, weight_decay=0.0,
              exclude=lambda name: name.endswith(".b")):
    """Layer-wise trust-ratio scaling, then momentum.

    ``v <- momentum*v + lr*local_lr*(g + wd*w)``;  ``w <- w - v``.  Names
    matching ``exclude`` (biases by default) use ``local_lr = 1`` and no decay.
    """
    _check_shapes(params, grads)
    new_p, new_b = {}, {}
    for k, w in params.items():
        v = state.buffers.get(k)
        v = np.zeros_like(w) if v is None else v
        rate = lr[k] if isinstance(lr, dict) else lr
        if exclude is not None and exclude(k):
            v = momentum * v + rate * grads[k]
        else:
            local = lars_local_lr(w, grads[k], trust_coef, weight_decay)
            v = momentum * v + rate * local * (grads[k] + weight_decay * w)
        new_p[k] = w - v
        new_b[k] = v
    return new_p, OptState(new_b, state.step + 1)


# data sources -------------------------------------------------------------

class SyntheticSource:
    """Fresh positive pairs every step from the generator."""

    def __init__(self, spec: datagen.SyntheticSpec, eval_size: int = 1000):
        self.spec = spec
        self.dictionary = datagen.build_dictionary(spec)
        self.eval_size = eval_size
        self._eval = None

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def n_classes(self) -> int:
        return self.spec.m

    def batches(self, rng, batch_size, steps) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for _ in range(steps):
            x, xp, _ = datagen.make_batch(self.spec, self.dictionary, rng, batch_size)
            yield x, xp

    def eval_pairs(self):
        """Fixed evaluation pairs (x, x_plus, labels, latents)."""
        if self._eval is None:
            rng = datagen.rng_stream(self.spec.seed, 777)
            x, xp, lat = datagen.make_batch(self.spec, self.dictionary, rng, self.eval_size)
            self._eval = (x, xp, lat.class_id, lat)
        return self._eval


class ArraySource:
    """Labelled array data with the intensity-and-noise view surrogate."""

    def __init__(self, train: datagen.LabeledSet, eval_set: datagen.LabeledSet | None = None,
                 scale_range=(0.8, 1.2), noise_sigma=0.1, eval_size: int = 1000):
        self.train = train
        self.eval_set = eval_set or train
        self.scale_range = scale_range
        self.noise_sigma = noise_sigma
        self.eval_size = eval_size
        self._eval = None

    @property
    def d(self) -> int:
        return self.train.X.shape[1]

    @property
    def n_classes(self) -> int:
        return self.train.class_count

    def view(self, rng, X):
        lo, hi = self.scale_range
        s = rng.uniform(lo, hi, size=(len(X), 1))
        return X * s + self.noise_sigma * rng.standard_normal(X.shape)

    def batches(self, rng, batch_size, steps):
        n = len(self.train.X)
        for _ in range(steps):
            idx = rng.choice(n, size=batch_size, replace=False)
            X = self.train.X[idx]
            yield self.view(rng, X), self.view(rng, X)

    def eval_pairs(self):
        if self._eval is None:
            rng = datagen.rng_stream(0, 777)
            n = min(self.eval_size, len(self.eval_set.X))
            idx = np.sort(rng.choice(len(self.eval_set.X), size=n, replace=False))
            X = self.eval_set.X[idx]
            self._eval = (self.view(rng, X), self.view(rng, X), self.eval_set.y[idx], None)
        return self._eval


# training -------------------------------------------------------------------

@dataclass
class GradStatsLog:
    epochs: list[int] = field(default_factory=list)
    af: list[np.ndarray] = field(default_factory=list)
    gv: list[np.ndarray] = field(default_factory=list)
    sc: list[np.ndarray] = field(default_factory=list)

    def append(self, epoch, af, gv, sc):
        self.epochs.append(epoch)
        self.af.append(af)
        self.gv.append(gv)
        self.sc.append(sc)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt_state: OptState
    stats: GradStatsLog
    rows: list[dict]
    losses: list[LossBreakdown]


def _first_nonfinite(named: dict[str, np.ndarray]) -> Optional[str]:
    for k, v in named.items():
        if not np.all(np.isfinite(v)):
            return k
    return None


def loss_and_grads(params, mspec: ModelSpec, cfg: TrainConfig, x, xp, rng=None, noise=None):
    """One graph: returns (LossBreakdown, grads by param name, graph, fwd pair)."""
    g = Graph()
    pids = {k: g.param(v) for k, v in params.items()}
    na = noise[0] if noise else None
    npp = noise[1] if noise else None
    fa = forward(g, pids, mspec, cfg.strategy, x, rng=rng, gumbel_noise=na)
    fp = forward(g, pids, mspec, cfg.strategy, xp, rng=rng, gumbel_noise=npp)
    total, _, _, br = total_loss_node(g, fa, fp, cfg.sim, cfg.lam, cfg.rho, cfg.symmetric_kl)
    if not math.isfinite(br.total):
        bad = _first_nonfinite({f"node {i} ({n.op})": n.value for i, n in enumerate(g.nodes)})
        raise NumericalError(f"non-finite loss; first non-finite tensor: {bad}")
    gr = backward(g, total)
    grads = {k: gr[pid] for k, pid in pids.items()}
    return br, grads, g, (fa, fp)


def feature_gradients(params, mspec: ModelSpec, cfg: TrainConfig, x, xp, chunk: int | None = None,
                      seed: int = 0) -> np.ndarray:
    """Per-sample ``dL_total/dz`` for each anchor row, at frozen parameters.

    ``z`` is fed to the loss as a leaf, so the gradient is w.r.t. the raw
    encoder output.  Rows are scaled by the chunk size so each is the
    gradient of that sample's own loss term.
    """
    chunk = chunk or cfg.batch_size
    enc_a = infer_numpy(params, mspec, MaskStrategy("none"), x)["z"]
    enc_p = infer_numpy(params, mspec, MaskStrategy("none"), xp)["z"]
    rng = datagen.rng_stream(seed, 4242)
    gate_names = [k for k in params if k.startswith("gate.")]
    out = np.zeros_like(enc_a)
    n = len(x)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        if e - s < 2:
            s = max(0, e - 2)
        g = Graph()
        za = g.param(enc_a[s:e])
        zp = g.const(enc_p[s:e])
        pids = {k: g.const(params[k]) for k in gate_names}
        fa = gate_features(g, pids, mspec, cfg.strategy, za, rng)
        fp = gate_features(g, pids, mspec, cfg.strategy, zp, rng)
        total, *_ = total_loss_node(g, fa, fp, cfg.sim, cfg.lam, cfg.rho, cfg.symmetric_kl)
        gr = backward(g, total)[za]
        out[s:e] = gr * (e - s)
    return out


def representation(params, mspec: ModelSpec, strategy: MaskStrategy, X) -> np.ndarray:
    """Features used for evaluation: gated output (raw output when ungated)."""
    return infer_numpy(params, mspec, strategy, X)["z_gated"]


def grad_stats(params, mspec, cfg, source, eps: float = EPS):
    """(AF, GV, SC) per dim on the source's evaluation pairs."""
    x, xp, y, _ = source.eval_pairs()
    feats = representation(params, mspec, cfg.strategy, x)
    af = activation_frequency(feats, eps)
    grads = feature_gradients(params, mspec, cfg, x, xp, seed=cfg.seed)
    gv = grads.var(axis=0)
    try:
        sc, _ = semantic_consistency(feats, y, eps, n_classes=source.n_classes)
    except ValueError:
        sc = np.full(feats.shape[1], np.nan)
    return af, gv, sc


def train(
    cfg: TrainConfig,
    mspec: ModelSpec,
    source,
    eval_hook: Optional[Callable[[int, dict], dict]] = None,
    snapshot: Optional[Callable[[int, dict, OptState], None]] = None,
    init: Optional[dict[str, np.ndarray]] = None,
    step_hook: Optional[Callable[[int, dict, dict], None]] = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``cfg.steps_per_epoch`` steps.

    Deterministic for a fixed seed.  ``snapshot(epoch, params, state)`` is
    called every ``stats_every`` epochs alongside the gradient statistics;
    ``step_hook(step, params, grads)`` sees every step's gradients.
    """
    params = init if init is not None else init_params(
        mspec, datagen.rng_stream(cfg.seed, 1), with_gate=cfg.strategy.gated,
        gate_bias=math.log(cfg.gate_init_prob / (1.0 - cfg.gate_init_prob)),
    )
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    state = OptState()
    data_rng = datagen.rng_stream(cfg.seed, 0)
    mask_rng = datagen.rng_stream(cfg.seed, 2)
    lrs = {k: (cfg.gate_lr if k.startswith("gate.") else cfg.backbone_lr) for k in params}
    stats = GradStatsLog()
    rows: list[dict] = []
    losses: list[LossBreakdown] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        acc = np.zeros(3)
        for x, xp in source.batches(data_rng, cfg.batch_size, cfg.steps_per_epoch):
            br, grads, _, _ = loss_and_grads(params, mspec, cfg, x, xp, rng=mask_rng)
            bad = _first_nonfinite(grads)
            if bad is not None:
                raise NumericalError(f"non-finite gradient in {bad} at step {step}")
            if step_hook is not None:
                step_hook(step, params, grads)
            if cfg.optimizer == "sgd":
                params, state = sgd_step(params, grads, state, lrs, cfg.momentum, cfg.weight_decay)
            else:
                params, state = lars_step(params, grads, state, lrs, cfg.trust_coef, cfg.momentum,
                                          cfg.weight_decay)
            bad = _first_nonfinite(params)
            if bad is not None:
                raise NumericalError(f"non-finite parameter {bad} after step {step}")
            acc += (br.align, br.sparsity, br.total)
            losses.append(br)
            step += 1
        acc /= max(cfg.steps_per_epoch, 1)
        x_eval = source.eval_pairs()[0]
        act = activation_ratio(representation(params, mspec, cfg.strategy, x_eval))
        row = {"epoch": epoch, "align": acc[0], "sparsity": acc[1], "total": acc[2], "act_ratio": act}
        if eval_hook is not None:
            row.update(eval_hook(epoch, params) or {})
        rows.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if cfg.stats_every and epoch % cfg.stats_every == 0:
            stats.append(epoch, *grad_stats(params, mspec, cfg, source))
            if snapshot is not None:
                snapshot(epoch, params, state)
    return TrainResult(params, state, stats, rows, losses)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])


# checkpoints ----------------------------------------------------------------
#
# "NGCL" | u16 version | u32 section count | sections...
# section: u8 kind (1 json, 2 tensor) | u16 name len | name | u64 payload len | payload
# tensor payload: u32 rows | u32 cols | rows*cols little-endian float64

MAGIC = b"NGCL"
VERSION = 1
_JSON, _TENSOR = 1, 2


class CheckpointError(ValueError):
    pass


def _section(kind: int, name: str, payload: bytes) -> bytes:
    nb = name.encode("utf-8")
    return struct.pack("<BH", kind, len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(path, params: dict, opt_state: OptState, config: dict) -> None:
    """Write atomically (temp file + rename)."""
    sections = [_section(_JSON, "config", json.dumps(config, sort_keys=True, separators=(",", ":")).encode())]
    sections.append(_section(_JSON, "opt", json.dumps({"step": opt_state.step}).encode()))
    for prefix, tensors in (("param:", params), ("buf:", opt_state.buffers)):
        for k in sorted(tensors):
            a = np.ascontiguousarray(tensors[k], dtype="<f8")
            if a.ndim != 2:
                raise CheckpointError(f"tensor {k} is not 2-D")
            sections.append(_section(_TENSOR, prefix + k, struct.pack("<II", *a.shape) + a.tobytes()))
    blob = MAGIC + struct.pack("<HI", VERSION, len(sections)) + b"".join(sections)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _take(buf: bytes, off: int, n: int, what: str) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {off}, file has {len(buf)}")
    return buf[off:off + n], off + n


def load_checkpoint(path) -> tuple[dict, OptState, dict]:
    """Returns (params, opt_state, config)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise CheckpointError(f"bad magic {raw!r} at offset 0")
    raw, off = _take(buf, off, 6, "header")
    version, count = struct.unpack("<HI", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    params, buffers, config, step = {}, {}, None, 0
    for _ in range(count):
        start = off
        raw, off = _take(buf, off, 3, "section header")
        kind, nlen = struct.unpack("<BH", raw)
        raw, off = _take(buf, off, nlen, "section name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 8, "section length")
        (plen,) = struct.unpack("<Q", raw)
        payload, off = _take(buf, off, plen, f"section {name!r}")
        if kind == _JSON:
            obj = json.loads(payload.decode("utf-8"))
            if name == "config":
                config = obj
            elif name == "opt":
                step = int(obj["step"])
        elif kind == _TENSOR:
            if plen < 8:
                raise CheckpointError(f"tensor section {name!r} too short at offset {start}")
            r, c = struct.unpack("<II", payload[:8])
            if plen != 8 + 8 * r * c:
                raise CheckpointError(f"tensor section {name!r} at offset {start}: {plen} bytes for {r}x{c}")
            arr = np.frombuffer(payload[8:], dtype="<f8").reshape(r, c).astype(np.float64)
            if name.startswith("param:"):
                params[name[6:]] = arr
            elif name.startswith("buf:"):
                buffers[name[4:]] = arr
        else:
            raise CheckpointError(f"unknown section kind {kind} at offset {start}")
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after offset {off}")
    if config is None:
        raise CheckpointError("checkpoint has no config section")
    return params, OptState(buffers, step), config
