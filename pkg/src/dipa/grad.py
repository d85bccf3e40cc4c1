"""Reverse-mode differentiation over the closed kernel set.

Differentiable functions in this module accept plain arrays or :class:`Var`
handles. When no argument is a ``Var`` the kernel runs eagerly and returns an
array, so frozen computation never touches a tape. Only values that depend on
a trainable leaf are recorded, and gradients are only propagated to those.

    tape = Tape()
    g = tape.leaf(np.ones(4), "gamma")
    loss = sum_(scale_shift(x, g, b))
    grads = tape.backward(loss)       # {"gamma": ...}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import tensor as T
from .errors import NonFiniteError, ShapeError, UsageError


class UnregisteredOpError(RuntimeError):
    """An op-kind reached backward without a registered adjoint."""


class Var:
    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


@dataclass
class Node:
    op: str
    parents: tuple  # Var or None per positional input
    args: tuple  # raw input values
    value: np.ndarray
    saved: dict = field(default_factory=dict)

    @property
    def needs(self) -> tuple:
        return tuple(p is not None for p in self.parents)


ADJOINTS: dict[str, Callable] = {}


def adjoint(op: str):
    def register(fn):
        ADJOINTS[op] = fn
        return fn

    return register


class Tape:
    """Append-only record of differentiable operations.

    Node ids are positions in ``nodes``, so inputs always precede outputs.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Var] = {}

    def leaf(self, value, name: str) -> Var:
        if name in self.leaves:
            raise UsageError(f"duplicate leaf name {name!r}")
        value = T.as_tensor(value)
        var = self._append(Node("leaf", (), (), value))
        self.leaves[name] = var
        return var

    def _append(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.value)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradient of scalar ``loss`` for every trainable leaf, keyed by name.

        Leaves that the loss does not depend on get zero tensors.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise UsageError("loss is not recorded on this tape")
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for nid in range(loss.id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.op == "leaf":
                continue
            fn = ADJOINTS.get(node.op)
            if fn is None:
                raise UnregisteredOpError(f"no adjoint registered for op {node.op!r}")
            del grads[nid]
            for parent, gp in zip(node.parents, fn(g, node)):
                if parent is None:
                    continue
                if gp is None:
                    raise UnregisteredOpError(f"adjoint of {node.op!r} skipped a required input")
                if not T.all_finite(gp):
                    raise NonFiniteError(f"non-finite gradient in adjoint of {node.op!r}")
                if gp.shape != parent.value.shape:
                    raise ShapeError(f"adjoint of {node.op!r} returned {gp.shape}, expected {parent.value.shape}")
                prev = grads.get(parent.id)
                grads[parent.id] = gp if prev is None else prev + gp
        return {
            name: grads.get(var.id, np.zeros_like(var.value)) for name, var in self.leaves.items()
        }


def value(x):
    return x.value if isinstance(x, Var) else x


def _record(op: str, inputs: Sequence, out: np.ndarray, **saved):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise UsageError("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return out
    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    args = tuple(value(x) for x in inputs)
    return tape._append(Node(op, parents, args, out, saved))


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` by reversing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- forward wrappers ----------------------------------------------------------


def matmul(a, b):
    return _record("matmul", (a, b), T.matmul(value(a), value(b)))


def add(a, b):
    return _record("add", (a, b), T.add(value(a), value(b)))


def mul(a, b):
    return _record("mul", (a, b), T.mul(value(a), value(b)))


def concat(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    return _record("concat", tuple(xs), T.concat(vals, axis), axis=axis)


def layernorm(x, gain, bias, eps: float = T.LN_EPS):
    return _record("layernorm", (x, gain, bias), T.layernorm(value(x), value(gain), value(bias), eps), eps=eps)


def softmax(x, axis: int = -1):
    return _record("softmax", (x,), T.softmax(value(x), axis), axis=axis)


def gelu(x):
    return _record("gelu", (x,), T.gelu(value(x)))


def l2_normalize(x, eps_norm: float = T.EPS_NORM):
    return _record("l2_normalize", (x,), T.l2_normalize(value(x), eps_norm), eps_norm=eps_norm)


def scale_shift(x, gamma, beta):
    return _record("scale_shift", (x, gamma, beta), T.scale_shift(value(x), value(gamma), value(beta)))


def cosine_sim(x, a, eps_norm: float = T.EPS_NORM):
    """Row-wise cosine similarity matrix ``[M, N]`` of ``x[M, D]`` and ``a[N, D]``."""
    xv, av = value(x), value(a)
    if xv.ndim != 2 or av.ndim != 2:
        raise ShapeError("differentiable cosine_sim expects 2-D operands")
    return _record("cosine_sim", (x, a), T.cosine_sim(xv, av, eps_norm), eps_norm=eps_norm)


def sum_(x, axis=None, keepdims: bool = False):
    return _record("sum", (x,), np.asarray(np.sum(value(x), axis=axis, keepdims=keepdims)), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return _record("mean", (x,), np.asarray(np.mean(value(x), axis=axis, keepdims=keepdims)), axis=axis, keepdims=keepdims)


def logsumexp(x, axis: int = -1):
    return _record("logsumexp", (x,), T.logsumexp(value(x), axis), axis=axis)


def log1p_sum_exp(z, mask, axis: int = 0):
    mask = np.asarray(mask, dtype=bool)
    return _record("log1p_sum_exp", (z,), T.log1p_sum_exp(value(z), mask, axis), mask=mask, axis=axis)


def reshape(x, shape):
    return _record("reshape", (x,), np.reshape(value(x), shape))


def permute(x, axes):
    return _record("permute", (x,), np.ascontiguousarray(np.transpose(value(x), axes)), axes=tuple(axes))


def getitem(x, key):
    """Basic (int/slice) indexing."""
    return _record("getitem", (x,), np.ascontiguousarray(value(x)[key]), key=key)


# -- adjoints --------------------------------------------------------------------


def _t(x):
    return np.swapaxes(x, -1, -2)


@adjoint("matmul")
def _matmul_adj(g, node):
    a, b = node.args
    na, nb = node.needs
    ga = unbroadcast(g @ _t(b), a.shape) if na else None
    gb = unbroadcast(_t(a) @ g, b.shape) if nb else None
    return ga, gb


@adjoint("add")
def _add_adj(g, node):
    a, b = node.args
    na, nb = node.needs
    return (
        unbroadcast(g, np.shape(a)) if na else None,
        unbroadcast(g, np.shape(b)) if nb else None,
    )


@adjoint("mul")
def _mul_adj(g, node):
    a, b = node.args
    na, nb = node.needs
    return (
        unbroadcast(g * b, np.shape(a)) if na else None,
        unbroadcast(g * a, np.shape(b)) if nb else None,
    )


@adjoint("concat")
def _concat_adj(g, node):
    axis = node.saved["axis"]
    bounds = np.cumsum([x.shape[axis] for x in node.args])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return tuple(p if need else None for p, need in zip(parts, node.needs))


@adjoint("layernorm")
def _layernorm_adj(g, node):
    x, gain, bias = node.args
    nx, ngain, nbias = node.needs
    xhat, inv_std = T.layernorm_stats(x, node.saved["eps"])
    lead = tuple(range(x.ndim - 1))
    gx = None
    if nx:
        gxhat = g * gain
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
    return (
        gx,
        (g * xhat).sum(axis=lead) if ngain else None,
        g.sum(axis=lead) if nbias else None,
    )


@adjoint("softmax")
def _softmax_adj(g, node):
    y = node.value
    axis = node.saved["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@adjoint("gelu")
def _gelu_adj(g, node):
    (x,) = node.args
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (g * (cdf + x * pdf),)


@adjoint("l2_normalize")
def _l2_normalize_adj(g, node):
    (x,) = node.args
    y = node.value
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)


@adjoint("scale_shift")
def _scale_shift_adj(g, node):
    x, gamma, beta = node.args
    nx, ngamma, nbeta = node.needs
    lead = tuple(range(x.ndim - 1))
    return (
        g * gamma if nx else None,
        (g * x).sum(axis=lead) if ngamma else None,
        g.sum(axis=lead) if nbeta else None,
    )


@adjoint("cosine_sim")
def _cosine_sim_adj(g, node):
    x, a = node.args
    nx, na = node.needs
    s = node.value
    xnorm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    anorm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    xn, an = x / xnorm, a / anorm
    gs = g * s
    gx = (g @ an - gs.sum(axis=1)[:, None] * xn) / xnorm if nx else None
    ga = (g.T @ xn - gs.sum(axis=0)[:, None] * an) / anorm if na else None
    return gx, ga


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@adjoint("sum")
def _sum_adj(g, node):
    (x,) = node.args
    return (np.array(_expand_reduced(g, x.shape, node.saved["axis"], node.saved["keepdims"])),)


@adjoint("mean")
def _mean_adj(g, node):
    (x,) = node.args
    axis = node.saved["axis"]
    count = x.size // max(np.size(node.value), 1) if axis is not None else x.size
    return (np.array(_expand_reduced(g, x.shape, axis, node.saved["keepdims"])) / count,)


@adjoint("logsumexp")
def _logsumexp_adj(g, node):
    (x,) = node.args
    axis = node.saved["axis"]
    out = np.expand_dims(node.value, axis)
    return (np.expand_dims(g, axis) * np.exp(x - out),)


@adjoint("log1p_sum_exp")
def _log1p_sum_exp_adj(g, node):
    (z,) = node.args
    axis, mask = node.saved["axis"], node.saved["mask"]
    out = np.expand_dims(node.value, axis)
    weights = np.where(mask, np.exp(np.where(mask, z, 0.0) - out), 0.0)
    return (np.expand_dims(g, axis) * weights,)


@adjoint("reshape")
def _reshape_adj(g, node):
    return (g.reshape(node.args[0].shape),)


@adjoint("permute")
def _permute_adj(g, node):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(node.saved["axes"]))),)


@adjoint("getitem")
def _getitem_adj(g, node):
    (x,) = node.args
    out = np.zeros_like(x)
    out[node.saved["key"]] = g
    return (out,)
