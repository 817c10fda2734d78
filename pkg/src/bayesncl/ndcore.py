"""Dense 2-D float64 numerics with reverse-mode differentiation.

A :class:`Graph` is a Wengert list: every op appends a node holding its
cached output, and :func:`backward` walks the list in reverse.  Tensors are
plain ``numpy`` arrays that are always 2-D, float64 and C-contiguous; no op
broadcasts.

Shapes per op (``a``/``b`` are inputs)::

    matmul           (n,k) @ (k,m) -> (n,m); with trans_b: (n,k) @ (m,k)^T
    add/sub/mul      (n,k), (n,k) -> (n,k)
    relu/sigmoid/exp/log/neg/scale/stop_gradient   (n,k) -> (n,k)
    row_sum          (n,k) -> (n,1)
    mean_all         (n,k) -> (1,1)
    logsumexp_rows   (n,k) -> (n,1)
    l2_normalize_rows (n,k) -> (n,k)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OPS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "neg",
    "scale",
    "row_sum",
    "mean_all",
    "logsumexp_rows",
    "l2_normalize_rows",
    "stop_gradient",
)

# rows with a smaller norm are divided by this instead of their norm
NORM_FLOOR = 1e-30


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (scalars become 1x1, vectors rows)."""
    a = np.array(x, dtype=np.float64, copy=True)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated on the stable branch for each sign."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=1, keepdims=True)
    return mx + np.log(np.exp(x - mx).sum(axis=1, keepdims=True))


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)


class Graph:
    """Single-owner computation tape.

    ``frozen`` replays a previous graph: the i-th ``stop_gradient`` node takes
    the i-th frozen value instead of its input.  :func:`grad_check` uses this
    so finite differences see the same surrogate that backward differentiates.
    """

    def __init__(self, frozen: Sequence[np.ndarray] | None = None):
        self.nodes: list[Node] = []
        self.params: list[int] = []
        self._frozen = list(frozen) if frozen is not None else None
        self._n_sg = 0

    # leaves -----------------------------------------------------------
    def param(self, value) -> int:
        nid = self._push(Node("param", (), as_tensor(value), True))
        self.params.append(nid)
        return nid

    def const(self, value) -> int:
        return self._push(Node("const", (), as_tensor(value), False))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    # ops ---------------------------------------------------------------
    def apply(self, op: str, *inputs: int, **attrs) -> int:
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input node {i} does not exist")
        vals = [self.nodes[i].value for i in inputs]
        out = _FORWARD[op](self, vals, attrs)
        req = op != "stop_gradient" and any(self.nodes[i].requires_grad for i in inputs)
        return self._push(Node(op, tuple(inputs), out, req, attrs))

    def matmul(self, a, b, trans_b=False):
        return self.apply("matmul", a, b, trans_b=trans_b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def relu(self, a):
        return self.apply("relu", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def exp(self, a):
        return self.apply("exp", a)

    def log(self, a):
        return self.apply("log", a)

    def neg(self, a):
        return self.apply("neg", a)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def row_sum(self, a):
        return self.apply("row_sum", a)

    def mean_all(self, a):
        return self.apply("mean_all", a)

    def logsumexp_rows(self, a):
        return self.apply("logsumexp_rows", a)

    def l2_normalize_rows(self, a):
        return self.apply("l2_normalize_rows", a)

    def stop_gradient(self, a):
        return self.apply("stop_gradient", a)


def _same_shape(op, vals):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fwd_matmul(g, vals, attrs):
    a, b = vals
    if attrs.get("trans_b"):
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"matmul(trans_b): shape mismatch {a.shape} @ {b.shape}^T")
        return a @ b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _fwd_binary(name, fn):
    def fwd(g, vals, attrs):
        _same_shape(name, vals)
        return fn(*vals)

    return fwd


def _fwd_log(g, vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise DomainError(f"log: non-positive entry (min {a.min()!r}) in input of shape {a.shape}")
    return np.log(a)


def _fwd_l2n(g, vals, attrs):
    (a,) = vals
    r = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return a / np.maximum(r, NORM_FLOOR)


def _fwd_stop(g, vals, attrs):
    (a,) = vals
    k = g._n_sg
    g._n_sg += 1
    if g._frozen is not None:
        if k >= len(g._frozen) or g._frozen[k].shape != a.shape:
            raise ShapeError("stop_gradient replay does not match the recorded graph")
        return g._frozen[k].copy()
    return a.copy()


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_binary("add", np.add),
    "sub": _fwd_binary("sub", np.subtract),
    "mul": _fwd_binary("mul", np.multiply),
    "relu": lambda g, v, at: np.maximum(v[0], 0.0),
    "sigmoid": lambda g, v, at: sigmoid(v[0]),
    "exp": lambda g, v, at: np.exp(v[0]),
    "log": _fwd_log,
    "neg": lambda g, v, at: -v[0],
    "scale": lambda g, v, at: at["c"] * v[0],
    "row_sum": lambda g, v, at: v[0].sum(axis=1, keepdims=True),
    "mean_all": lambda g, v, at: np.array([[v[0].mean()]]),
    "logsumexp_rows": lambda g, v, at: logsumexp_rows(v[0]),
    "l2_normalize_rows": _fwd_l2n,
    "stop_gradient": _fwd_stop,
}


def _vjp(node: Node, ins: list[np.ndarray], gout: np.ndarray) -> list[np.ndarray | None]:
    op, y = node.op, node.value
    if op == "matmul":
        a, b = ins
        if node.attrs.get("trans_b"):
            return [gout @ b, gout.T @ a]
        return [gout @ b.T, a.T @ gout]
    if op == "add":
        return [gout, gout]
    if op == "sub":
        return [gout, -gout]
    if op == "mul":
        return [gout * ins[1], gout * ins[0]]
    if op == "relu":
        return [gout * (ins[0] > 0)]
    if op == "sigmoid":
        return [gout * y * (1.0 - y)]
    if op == "exp":
        return [gout * y]
    if op == "log":
        return [gout / ins[0]]
    if op == "neg":
        return [-gout]
    if op == "scale":
        return [node.attrs["c"] * gout]
    if op == "row_sum":
        return [np.repeat(gout, ins[0].shape[1], axis=1)]
    if op == "mean_all":
        return [np.full(ins[0].shape, gout[0, 0] / ins[0].size)]
    if op == "logsumexp_rows":
        return [gout * np.exp(ins[0] - y)]
    if op == "l2_normalize_rows":
        x = ins[0]
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        r = np.maximum(norm, NORM_FLOOR)
        proj = (gout * y).sum(axis=1, keepdims=True)
        # a row at the floor (in practice an all-zero row) has no direction;
        # like the relu kink it gets a zero subgradient instead of 1/floor
        return [np.where(norm > NORM_FLOOR, (gout - y * proj) / r, 0.0)]
    if op == "stop_gradient":
        return [None]
    raise ValueError(f"no vjp for {op!r}")


def backward(graph: Graph, output: int) -> dict[int, np.ndarray]:
    """Gradients of the scalar node ``output`` w.r.t. every parameter node.

    Parameters the output does not depend on get zero gradients.
    """
    out = graph.nodes[output]
    if out.value.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 output node, got shape {out.value.shape}")
    grads: dict[int, np.ndarray] = {output: np.ones((1, 1))}
    for nid in range(output, -1, -1):
        node = graph.nodes[nid]
        gout = grads.get(nid) if node.op == "param" else grads.pop(nid, None)
        if gout is None or not node.requires_grad or not node.inputs:
            continue
        ins = [graph.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, _vjp(node, ins, gout)):
            if gi is None or not graph.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return {
        p: grads.get(p, np.zeros_like(graph.nodes[p].value)) for p in graph.params
    }


def _relu_pattern(graph: Graph) -> list[np.ndarray]:
    return [graph.nodes[n.inputs[0]].value > 0 for n in graph.nodes if n.op == "relu"]


def _sg_values(graph: Graph) -> list[np.ndarray]:
    return [n.value for n in graph.nodes if n.op == "stop_gradient"]


def grad_check(
    f: Callable[[Graph, list[int]], int],
    params: Sequence[np.ndarray],
    eps: float = 1e-6,
    return_count: bool = False,
):
    """Max relative error between backward and central differences.

    ``f(graph, param_ids)`` builds a scalar output node from the parameter
    nodes.  Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``stop_gradient`` outputs stay frozen at the base point, and coordinates
    whose perturbation moves any relu input across 0 are skipped (kinks).
    With ``return_count`` also returns the number of coordinates compared.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    base = [as_tensor(p) for p in params]

    g0 = Graph()
    ids = [g0.param(p) for p in base]
    out = f(g0, ids)
    f0 = g0.value(out)
    if not np.all(np.isfinite(f0)):
        raise FloatingPointError("grad_check: f is not finite at the base point")
    analytic = backward(g0, out)
    frozen = _sg_values(g0)
    pattern = _relu_pattern(g0)

    def evaluate(vals):
        g = Graph(frozen=frozen)
        pids = [g.param(v) for v in vals]
        o = f(g, pids)
        v = float(g.value(o)[0, 0])
        if not math.isfinite(v):
            raise FloatingPointError("grad_check: f is not finite near the base point")
        kink = any(
            not np.array_equal(p0, p1) for p0, p1 in zip(pattern, _relu_pattern(g))
        )
        return v, kink

    worst = 0.0
    compared = 0
    for pi, p in enumerate(base):
        for idx in np.ndindex(p.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[pi][idx] += eps
            minus[pi][idx] -= eps
            fp, kp = evaluate(plus)
            fm, km = evaluate(minus)
            if kp or km:
                continue
            num = (fp - fm) / (2 * eps)
            ana = analytic[ids[pi]][idx]
            worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
            compared += 1
    return (worst, compared) if return_count else worst
