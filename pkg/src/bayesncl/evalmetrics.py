"""Interpretability metrics, linear probe, retrieval and rank correlation.

A dimension ``j`` is active on sample ``i`` when ``|z_ij| > eps``.  Per-dim
scores are NaN for dimensions with no active sample; aggregates average over
active dimensions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-5


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    sc: np.ndarray
    mean_sc: float
    h_sum: float
    h_mean: float
    h_freq: float
    activation_ratio: float
    active_dims: np.ndarray

    def row(self) -> dict[str, float]:
        """Values in result-table column order: cons, h_sum, h_mean, h_freq, act."""
        return {
            "cons": 100.0 * self.mean_sc,
            "h_sum": self.h_sum,
            "h_mean": self.h_mean,
            "h_freq": self.h_freq,
            "act": self.activation_ratio,
        }


@dataclass
class ProbeResult:
    top1: float
    top5: float
    W: np.ndarray
    b: np.ndarray


@dataclass
class RetrievalResult:
    precision: dict[int, float]
    dims: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _prep(features, labels):
    Z = np.abs(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise MetricError("features must be a non-empty n x K array")
    if len(y) != Z.shape[0]:
        raise MetricError(f"{len(y)} labels for {Z.shape[0]} rows")
    return Z, y


def _class_counts(active: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    """(C, K) number of active samples per class and dim."""
    onehot = np.zeros((len(y), C))
    onehot[np.arange(len(y)), y] = 1.0
    return onehot.T @ active.astype(np.float64)


def _n_classes(y, n_classes):
    C = int(n_classes) if n_classes is not None else int(y.max()) + 1
    if C < 2:
        raise MetricError("need at least 2 classes")
    return C


def semantic_consistency(features, labels, eps: float = EPS, n_classes: int | None = None):
    """Per-dim share of the most frequent class among active samples.

    Returns ``(sc_per_dim, mean_sc)``.
    """
    Z, y = _prep(features, labels)
    C = _n_classes(y, n_classes)
    active = Z > eps
    counts = _class_counts(active, y, C)
    totals = counts.sum(axis=0)
    on = totals > 0
    if not on.any():
        raise MetricError("no active dimensions")
    sc = np.full(Z.shape[1], np.nan)
    sc[on] = counts[:, on].max(axis=0) / totals[on]
    return sc, float(sc[on].mean())


def _entropy_cols(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=0)


def semantic_entropy(features, labels, mode: str = "freq", eps: float = EPS, n_classes: int | None = None):
    """Entropy (nats) of each active dim's class distribution.

    ``sum``: share of activation mass per class; ``mean``: class-mean
    activation (over all class members) renormalized; ``freq``: share of
    active-sample counts.  Returns ``(h_per_dim, mean_h)``.
    """
    Z, y = _prep(features, labels)
    C = _n_classes(y, n_classes)
    active = Z > eps
    onehot = np.zeros((len(y), C))
    onehot[np.arange(len(y)), y] = 1.0
    if mode == "freq":
        w = onehot.T @ active.astype(np.float64)
    elif mode == "sum":
        w = onehot.T @ (Z * active)
    elif mode == "mean":
        n_c = onehot.sum(axis=0)
        w = (onehot.T @ (Z * active)) / np.where(n_c > 0, n_c, 1.0)[:, None]
    else:
        raise ValueError(f"unknown entropy mode {mode!r}")
    tot = w.sum(axis=0)
    on = active.any(axis=0) & (tot > 0)
    if not on.any():
        raise MetricError("no active dimensions")
    h = np.full(Z.shape[1], np.nan)
    h[on] = _entropy_cols(w[:, on] / tot[on])
    return h, float(h[on].mean())


def activation_ratio(features, eps: float = EPS) -> float:
    """Fraction of dims active on at least one sample."""
    Z = np.abs(np.asarray(features, dtype=np.float64))
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise MetricError("features must be a non-empty n x K array")
    return float((Z > eps).any(axis=0).mean())


def activation_frequency(features, eps: float = EPS) -> np.ndarray:
    """Per-dim fraction of samples on which the dim is active."""
    return (np.abs(np.asarray(features)) > eps).mean(axis=0)


def metrics_report(features, labels, eps: float = EPS, n_classes: int | None = None) -> MetricsReport:
    sc, msc = semantic_consistency(features, labels, eps, n_classes)
    hs = {m: semantic_entropy(features, labels, m, eps, n_classes)[1] for m in ("sum", "mean", "freq")}
    Z = np.abs(np.asarray(features))
    return MetricsReport(
        sc=sc, mean_sc=msc, h_sum=hs["sum"], h_mean=hs["mean"], h_freq=hs["freq"],
        activation_ratio=activation_ratio(features, eps),
        active_dims=np.flatnonzero((Z > eps).any(axis=0)),
    )


# linear probe ---------------------------------------------------------------

def _softmax(logits):
    s = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _topk_acc(logits, y, k):
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == y[:, None]).any(axis=1).mean())


def linear_probe(
    train_x, train_y, test_x, test_y,
    lr: float = 0.5, epochs: int = 300, wd: float = 0.0, n_classes: int | None = None,
    standardize: bool = True,
) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Weights start at zero, so the result is deterministic.  Features are
    standardized with training-set statistics when ``standardize``.
    """
    Xtr = np.asarray(train_x, dtype=np.float64)
    Xte = np.asarray(test_x, dtype=np.float64)
    ytr = np.asarray(train_y, dtype=np.int64)
    yte = np.asarray(test_y, dtype=np.int64)
    if len(np.unique(ytr)) < 2:
        raise MetricError("linear probe needs at least two classes in the training set")
    C = int(n_classes) if n_classes is not None else int(max(ytr.max(), yte.max())) + 1
    if standardize:
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        Xtr = (Xtr - mu) / sd
        Xte = (Xte - mu) / sd
    n, K = Xtr.shape
    W = np.zeros((K, C))
    b = np.zeros(C)
    Y = np.zeros((n, C))
    Y[np.arange(n), ytr] = 1.0
    for _ in range(epochs):
        P = _softmax(Xtr @ W + b)
        G = (P - Y) / n
        W -= lr * (Xtr.T @ G + wd * W)
        b -= lr * G.sum(axis=0)
    logits = Xte @ W + b
    return ProbeResult(_topk_acc(logits, yte, 1), _topk_acc(logits, yte, 5), W, b)


# retrieval ----------------------------------------------------------------

def select_dims(gallery, n_dims: int) -> np.ndarray:
    """Indices of the ``n_dims`` dims with the largest total |activation| (ties: lower index)."""
    mass = np.abs(np.asarray(gallery)).sum(axis=0)
    order = np.argsort(-mass, kind="stable")
    return np.sort(order[:n_dims])


def retrieval(
    query, query_labels, gallery, gallery_labels, ks=(1,), n_dims: int | None = None,
    same_set: bool | None = None,
) -> RetrievalResult:
    """Precision@k of cosine nearest neighbours, optionally on selected dims.

    When the query and gallery are the same set each query is removed from
    its own candidate list.
    """
    Q = np.asarray(query, dtype=np.float64)
    G = np.asarray(gallery, dtype=np.float64)
    yq = np.asarray(query_labels)
    yg = np.asarray(gallery_labels)
    K = G.shape[1]
    if isinstance(ks, int):
        ks = (ks,)
    if same_set is None:
        same_set = Q is G or (Q.shape == G.shape and np.array_equal(Q, G) and np.array_equal(yq, yg))
    avail = len(G) - (1 if same_set else 0)
    if max(ks) > avail or max(ks) < 1:
        raise ValueError(f"k={max(ks)} needs a gallery larger than k (have {avail} candidates)")
    if n_dims is None or n_dims == K:
        dims = np.arange(K)
    else:
        if n_dims > K or n_dims < 1:
            raise ValueError(f"cannot select {n_dims} of {K} dims")
        dims = select_dims(G, n_dims)
    Qd, Gd = Q[:, dims], G[:, dims]
    Qn = Qd / np.maximum(np.linalg.norm(Qd, axis=1, keepdims=True), 1e-30)
    Gn = Gd / np.maximum(np.linalg.norm(Gd, axis=1, keepdims=True), 1e-30)
    S = Qn @ Gn.T
    if same_set:
        np.fill_diagonal(S, -np.inf)
    kmax = max(ks)
    # parallel vectors can differ in the last ulp after normalisation, so
    # snap to a 1e-12 grid before the stable sort breaks ties by gallery index
    nn = np.argsort(-np.round(S, 12), axis=1, kind="stable")[:, :kmax]
    hits = yg[nn] == yq[:, None]
    return RetrievalResult({k: float(hits[:, :k].mean()) for k in ks}, dims)


# rank correlation ---------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ValueError(f"length mismatch {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise ValueError("spearman needs at least 3 points")
    rx = average_ranks(x) - (len(x) + 1) / 2.0
    ry = average_ranks(y) - (len(y) + 1) / 2.0
    sx = math.sqrt(float(rx @ rx))
    sy = math.sqrt(float(ry @ ry))
    if sx == 0 or sy == 0:
        raise ValueError("constant input")
    return float(rx @ ry) / (sx * sy)
