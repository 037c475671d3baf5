"""Reverse-mode differentiation over dense matrices.

A :class:`Tape` records each operation in execution order; :func:`backward`
sweeps the records once in reverse and applies each op's vector-Jacobian
product.  Values are float64 numpy matrices; every value is 2-D (scalars are
1x1).

Example::

    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    loss = tape.reduce_sum(tape.hadamard(x, x))
    grads = backward(tape, loss)        # {x.id: 2 * ones}
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import matcore
from .matcore import ShapeError, as_mat

__all__ = [
    "OP_KINDS",
    "Var",
    "Tape",
    "backward",
    "GradcheckReport",
    "gradcheck",
]


class Var:
    """Handle to one value on a tape."""

    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", vid: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = vid
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return self.tape.transpose(self)

    def _wrap(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.sub(self._wrap(other), self)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.hadamard(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, self._wrap(other))

    def __repr__(self):
        kind = "param" if self.requires_grad else "const"
        return f"Var(id={self.id}, shape={self.shape}, {kind})"


# -- forward rules: (values, attrs) -> (output, saved) -----------------------

def _fw_matmul(a, b):
    return matcore.matmul(a, b), None


def _fw_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b, None


def _fw_sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return a - b, None


def _fw_hadamard(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    return a * b, None


def _fw_scale(a, s=None, *, c=1.0):
    if s is None:
        return c * a, None
    if s.shape != (1, 1):
        raise ShapeError(f"scale: factor must be 1x1, got {s.shape}")
    return s[0, 0] * a, None


def _fw_row_sum_outer(z):
    # (Z 1 - 1) 1^T, same shape as Z
    return np.repeat(z.sum(axis=1, keepdims=True) - 1.0, z.shape[1], axis=1), None


def _fw_cross_entropy(logits, *, labels, mask):
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    rows = np.arange(n) if mask is None else np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy: empty mask")
    lab = labels[rows]
    if np.any(lab < 0) or np.any(lab >= c):
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    p = matcore.row_softmax(logits[rows])
    shifted = logits[rows] - logits[rows].max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(rows.size), lab]))
    return np.array([[loss]]), (rows, lab, p)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_FORWARD = {
    "matmul": _fw_matmul,
    "transpose": lambda a: (a.T.copy(), None),
    "add": _fw_add,
    "sub": _fw_sub,
    "scale": _fw_scale,
    "hadamard": _fw_hadamard,
    "exp": lambda a: (np.exp(a), None),
    "row_softmax": lambda a, *, scale=1.0: (matcore.row_softmax(a, scale), None),
    "soft_threshold": lambda y, tau: (matcore.soft_threshold(y, tau), None),
    "row_sum_outer": _fw_row_sum_outer,
    "reduce_sum": lambda a: (np.array([[a.sum()]]), None),
    "cross_entropy": _fw_cross_entropy,
    "relu": lambda a: (np.maximum(a, 0.0), None),
    "softplus": lambda a: (_softplus(a), None),
    "reciprocal": lambda a: (1.0 / a, None),
}

OP_KINDS = tuple(_FORWARD)


# -- vector-Jacobian products: (g, inputs, out, saved, attrs) -> input grads --

def _bw_matmul(g, ins, out, saved, attrs):
    a, b = ins
    return g @ b.T, a.T @ g


def _bw_scale(g, ins, out, saved, attrs):
    if len(ins) == 1:
        return (attrs.get("c", 1.0) * g,)
    a, s = ins
    return s[0, 0] * g, np.array([[np.sum(g * a)]])


def _bw_row_softmax(g, ins, out, saved, attrs):
    s = out
    scale = attrs.get("scale", 1.0)
    return (scale * s * (g - np.sum(g * s, axis=1, keepdims=True)),)


def _bw_soft_threshold(g, ins, out, saved, attrs):
    y, tau = ins
    # derivative at the kink |y| == tau is taken as 0
    active = np.abs(y) > tau
    return g * active, -g * np.sign(y) * active


def _bw_row_sum_outer(g, ins, out, saved, attrs):
    (z,) = ins
    return (np.repeat(g.sum(axis=1, keepdims=True), z.shape[1], axis=1),)


def _bw_cross_entropy(g, ins, out, saved, attrs):
    (logits,) = ins
    rows, lab, p = saved
    d = p.copy()
    d[np.arange(rows.size), lab] -= 1.0
    full = np.zeros_like(logits)
    full[rows] = d / rows.size
    return (g[0, 0] * full,)


_BACKWARD = {
    "matmul": _bw_matmul,
    "transpose": lambda g, ins, out, saved, attrs: (g.T,),
    "add": lambda g, ins, out, saved, attrs: (g, g),
    "sub": lambda g, ins, out, saved, attrs: (g, -g),
    "scale": _bw_scale,
    "hadamard": lambda g, ins, out, saved, attrs: (g * ins[1], g * ins[0]),
    "exp": lambda g, ins, out, saved, attrs: (g * out,),
    "row_softmax": _bw_row_softmax,
    "soft_threshold": _bw_soft_threshold,
    "row_sum_outer": _bw_row_sum_outer,
    "reduce_sum": lambda g, ins, out, saved, attrs: (np.full(ins[0].shape, g[0, 0]),),
    "cross_entropy": _bw_cross_entropy,
    "relu": lambda g, ins, out, saved, attrs: (g * (ins[0] > 0),),
    "softplus": lambda g, ins, out, saved, attrs: (g * _sigmoid(ins[0]),),
    "reciprocal": lambda g, ins, out, saved, attrs: (-g * out * out,),
}


@dataclass
class _Record:
    kind: str
    inputs: tuple
    out: int
    saved: object
    attrs: dict


class Tape:
    """Ordered record of operations; single owner while recording."""

    def __init__(self):
        self.records: list[_Record] = []
        self.values: list[np.ndarray] = []
        self.trainable: list[bool] = []

    def _new(self, value, requires_grad):
        vid = len(self.values)
        self.values.append(value)
        self.trainable.append(requires_grad)
        return Var(self, vid, value, requires_grad)

    def const(self, value) -> Var:
        return self._new(as_mat(value).copy(), False)

    def param(self, value) -> Var:
        return self._new(as_mat(value).copy(), True)

    def record(self, kind: str, *inputs: Var, **attrs) -> Var:
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind {kind!r}")
        for v in inputs:
            if v.tape is not self:
                raise ValueError("input recorded on a different tape")
        out, saved = _FORWARD[kind](*(v.value for v in inputs), **attrs)
        needs = any(v.requires_grad for v in inputs)
        res = self._new(out, needs)
        # grad-flow flag only; trainable params are those created by param()
        self.trainable[res.id] = False
        self.records.append(_Record(kind, tuple(v.id for v in inputs), res.id, saved, attrs))
        return res

    # thin named wrappers
    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def transpose(self, a):
        return self.record("transpose", a)

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def scale(self, a, s):
        """``s * a`` for a float constant or a 1x1 Var ``s``."""
        if isinstance(s, Var):
            return self.record("scale", a, s)
        return self.record("scale", a, c=float(s))

    def hadamard(self, a, b):
        return self.record("hadamard", a, b)

    def exp(self, a):
        return self.record("exp", a)

    def row_softmax(self, a, scale=1.0):
        return self.record("row_softmax", a, scale=float(scale))

    def soft_threshold(self, y, tau):
        return self.record("soft_threshold", y, tau)

    def row_sum_outer(self, z):
        return self.record("row_sum_outer", z)

    def reduce_sum(self, a):
        return self.record("reduce_sum", a)

    def cross_entropy(self, logits, labels, mask=None):
        m = None if mask is None else np.asarray(mask, dtype=bool)
        return self.record("cross_entropy", logits, labels=np.asarray(labels), mask=m)

    def relu(self, a):
        return self.record("relu", a)

    def softplus(self, a):
        return self.record("softplus", a)

    def reciprocal(self, a):
        return self.record("reciprocal", a)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a 1x1 ``loss`` w.r.t. every parameter on ``tape``.

    Parameters with no path to ``loss`` receive zero gradients.  Constants
    never get a gradient entry.
    """
    if loss.tape is not tape:
        raise ValueError("loss belongs to a different tape")
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    flows = [False] * len(tape.values)
    for i, t in enumerate(tape.trainable):
        flows[i] = t
    for rec in tape.records:
        flows[rec.out] = any(flows[i] for i in rec.inputs)

    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out, None) if not tape.trainable[rec.out] else grads.get(rec.out)
        if g is None:
            continue
        ins = [tape.values[i] for i in rec.inputs]
        in_grads = _BACKWARD[rec.kind](g, ins, tape.values[rec.out], rec.saved, rec.attrs)
        for vid, gi in zip(rec.inputs, in_grads):
            if not flows[vid]:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi
    return {
        vid: grads.get(vid, np.zeros_like(tape.values[vid]))
        for vid, t in enumerate(tape.trainable)
        if t
    }


# -- finite-difference check -------------------------------------------------

@dataclass
class GradcheckReport:
    op: str
    max_rel_err: float
    worst_index: list
    eps: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def gradcheck(f: Callable, params, eps: float = 1e-6, op: str = "custom",
              max_coords: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f(tape, vars)`` must record a scalar loss and return it; ``params`` is a
    sequence of arrays.  When ``max_coords`` is set, that many coordinates per
    parameter are sampled (deterministically from ``seed``); otherwise all are
    checked.  Relative error uses ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        warnings.warn(f"gradcheck eps={eps:g} outside [1e-7, 1e-3]; "
                      "expect degraded accuracy", stacklevel=2)
    params = [as_mat(p).copy() for p in params]

    def evaluate(vals, with_grad=False):
        tape = Tape()
        vs = [tape.param(v) for v in vals]
        loss = f(tape, vs)
        val = float(loss.value[0, 0])
        if not math.isfinite(val):
            raise FloatingPointError("gradcheck: objective is not finite")
        if with_grad:
            g = backward(tape, loss)
            return val, [g[v.id] for v in vs]
        return val

    _, analytic = evaluate(params, with_grad=True)
    rng = np.random.default_rng(seed)
    worst, worst_idx = 0.0, []
    for k, p in enumerate(params):
        flat = np.arange(p.size)
        if max_coords is not None and max_coords < p.size:
            flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        for idx in flat:
            i, j = divmod(int(idx), p.shape[1])
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][i, j] += eps
            minus[k][i, j] -= eps
            num = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            ana = analytic[k][i, j]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            if rel > worst or not worst_idx:
                worst, worst_idx = rel, [k, i, j]
    return GradcheckReport(op=op, max_rel_err=float(worst), worst_index=worst_idx, eps=eps)
