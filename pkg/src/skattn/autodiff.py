"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is a tape rebuilt on every forward pass: each operation output
records its parent tensors and a backward closure, tagged with a globally
increasing node id.  ``backward`` walks the reachable nodes exactly once in
reverse id order (reverse insertion order), so gradient accumulation happens
in a fixed order and repeated runs are bit-identical.  A single graph must
stay on one thread; independent graphs on different threads are fine because
ids only need to be monotone within a graph.

All arrays are float64 and row-major.  Ops never mutate their inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeMismatch",
    "NotScalar",
    "DetachedGraph",
    "Tensor",
    "tensor_create",
    "constant",
    "param",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "permute",
    "reshape",
    "concat",
    "slice_axis",
    "softmax",
    "layer_norm",
    "silu",
    "conv1x1",
    "conv3x3_stride2",
    "upsample_nearest_2x",
    "add_channel_bias",
    "sum_all",
    "mean_all",
    "backward",
    "zero_grads",
    "GradCheckEntry",
    "GradCheckReport",
    "grad_check",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class NotScalar(ValueError):
    """backward was asked to start from a non-scalar tensor."""


class DetachedGraph(RuntimeError):
    """backward was asked to start from a tensor with no recorded graph."""


_node_ids = itertools.count()


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward.

    ``requires_grad`` marks leaves that should receive gradients.  Outputs of
    ops get a backward closure only when at least one input requires grad;
    otherwise the computation leaves no trace on the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the value."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same value, no graph history, no gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_create(shape, data, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` from flat ``data`` (any sequence or array).

    Raises ShapeMismatch when the element count does not match the shape.
    """
    shape = tuple(int(s) for s in shape)
    arr = np.asarray(data, dtype=np.float64).reshape(-1)
    want = int(np.prod(shape)) if shape else 1
    if arr.size != want:
        raise ShapeMismatch(f"{arr.size} values cannot fill shape {shape}")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _record(out: Tensor, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Attach tape bookkeeping to an op output if any parent needs gradients."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / scalar


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g, flow):
        flow(a, g)
        flow(b, g)

    return _record(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g, flow):
        flow(a, g)
        flow(b, -g)

    return _record(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g, flow):
        flow(a, g * b.data)
        flow(b, g * a.data)

    return _record(out, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bw(g, flow):
        flow(a, -g)

    return _record(out, "neg", (a,), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def bw(g, flow):
        flow(a, g * s)

    return _record(out, "scale", (a,), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data + s)

    def bw(g, flow):
        flow(a, g)

    return _record(out, "add_scalar", (a,), bw)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x).  Sigmoid computed branch-wise so exp never overflows."""
    x = a.data
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    out = Tensor(x * sig)

    def bw(g, flow):
        flow(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _record(out, "silu", (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"permute axes {axes} invalid for ndim {a.ndim}")
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = tuple(np.argsort(axes))

    def bw(g, flow):
        flow(a, np.transpose(g, inv))

    return _record(out, "permute", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}")
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def bw(g, flow):
        flow(a, g.reshape(orig))

    return _record(out, "reshape", (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    nd = tensors[0].ndim
    axis = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != nd or [s for i, s in enumerate(other) if i != axis] != [
            s for i, s in enumerate(base) if i != axis
        ]:
            raise ShapeMismatch(f"concat: {tensors[0].shape} vs {t.shape} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, flow):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            flow(t, piece)

    return _record(out, "concat", tensors, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] outside axis of size {n}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    out = Tensor(a.data[idx].copy())

    def bw(g, flow):
        full = np.zeros_like(a.data)
        full[idx] = g
        flow(a, full)

    return _record(out, "slice_axis", (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: [m,k]@[k,n]; [...,m,k]@[k,n] (shared right operand);
    [...,m,k]@[...,k,n] with identical leading dims.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs 2D+ operands, got {a.shape} @ {b.shape}")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    elif ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    else:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = Tensor(ad @ bd)

    def bw(g, flow):
        if bd.ndim == 2:
            flow(a, g @ bd.T)
            # contract every axis of a except its last against the matching g axes
            flow(b, np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim - 1)))))
        else:
            flow(a, g @ np.swapaxes(bd, -1, -2))
            flow(b, np.swapaxes(ad, -1, -2) @ g)

    return _record(out, "matmul", (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``.

    NaN entries propagate to NaN outputs along their slice.
    """
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g, flow):
        flow(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _record(out, "softmax", (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    gamma and beta are 1D of length x.shape[-1].  A constant slice normalizes
    to zeros (variance guard eps), so the output there is beta.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine {gamma.shape}/{beta.shape} vs width {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(gamma.data * xh + beta.data)

    def bw(g, flow):
        lead = (-1, d)
        flow(gamma, np.sum((g * xh).reshape(lead), axis=0))
        flow(beta, np.sum(g.reshape(lead), axis=0))
        dxh = g * gamma.data
        m1 = np.mean(dxh, axis=-1, keepdims=True)
        m2 = np.mean(dxh * xh, axis=-1, keepdims=True)
        flow(x, inv * (dxh - m1 - xh * m2))

    return _record(out, "layer_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# map ops ([channels, height, width] layout)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution: out[o] = sum_i w[o,i] * x[i] + b[o].

    With w == 0 and b == 0 the output is exactly the zero map for any finite
    input (each entry is a sum of exact-zero products).
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1x1 x{x.shape} w{w.shape} b{b.shape}")
    y = np.tensordot(w.data, x.data, axes=([1], [0])) + b.data[:, None, None]
    out = Tensor(y)

    def bw(g, flow):
        flow(w, np.tensordot(g, x.data, axes=([1, 2], [1, 2])))
        flow(b, g.sum(axis=(1, 2)))
        flow(x, np.tensordot(w.data, g, axes=([0], [0])))

    return _record(out, "conv1x1", (x, w, b), bw)


def _im2col_3x3s2(xp: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Gather 3x3 stride-2 patches of padded input into [ci*9, oh*ow]."""
    ci = xp.shape[0]
    cols = np.empty((ci, 3, 3, oh, ow), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2]
    return cols.reshape(ci * 9, oh * ow)


def conv3x3_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 2, pad 1: the fixed downsampling kernel.

    Input [ci,h,w] with even h and w gives output [co,h/2,w/2].
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[1:] != (x.shape[0], 3, 3):
        raise ShapeMismatch(f"conv3x3_stride2 x{x.shape} w{w.shape}")
    co = w.shape[0]
    if b.shape != (co,):
        raise ShapeMismatch(f"conv3x3_stride2 bias {b.shape} vs {co} channels")
    ci, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ShapeMismatch(f"conv3x3_stride2 needs even spatial dims, got {h}x{wd}")
    oh, ow = h // 2, wd // 2
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col_3x3s2(xp, oh, ow)
    y = (w.data.reshape(co, ci * 9) @ cols).reshape(co, oh, ow) + b.data[:, None, None]
    out = Tensor(y)

    def bw(g, flow):
        gf = g.reshape(co, oh * ow)
        flow(w, (gf @ cols.T).reshape(co, ci, 3, 3))
        flow(b, g.sum(axis=(1, 2)))
        gcols = (w.data.reshape(co, ci * 9).T @ gf).reshape(ci, 3, 3, oh, ow)
        gxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                gxp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2] += gcols[:, ki, kj]
        flow(x, gxp[:, 1 : 1 + h, 1 : 1 + wd])

    return _record(out, "conv3x3_stride2", (x, w, b), bw)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a [c,h,w] map."""
    if x.ndim != 3:
        raise ShapeMismatch(f"upsample_nearest_2x expects [c,h,w], got {x.shape}")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def bw(g, flow):
        flow(x, g[:, 0::2, 0::2] + g[:, 0::2, 1::2] + g[:, 1::2, 0::2] + g[:, 1::2, 1::2])

    return _record(out, "upsample_nearest_2x", (x,), bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector to a [c,h,w] map."""
    if x.ndim != 3 or b.shape != (x.shape[0],):
        raise ShapeMismatch(f"add_channel_bias x{x.shape} b{b.shape}")
    out = Tensor(x.data + b.data[:, None, None])

    def bw(g, flow):
        flow(x, g)
        flow(b, g.sum(axis=(1, 2)))

    return _record(out, "add_channel_bias", (x, b), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))

    def bw(g, flow):
        flow(a, np.full_like(a.data, float(g)))

    return _record(out, "sum_all", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.sum(a.data) / n)

    def bw(g, flow):
        flow(a, np.full_like(a.data, float(g) / n))

    return _record(out, "mean_all", (a,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The incoming flow is kept in a local map while walking the tape, so a
    second backward on a rebuilt (or even the same) graph adds exactly one
    more copy of the gradient: accumulation without reset is well defined.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward from tensor of shape {loss.shape}")
    if loss._backward is None:
        raise DetachedGraph("tensor has no recorded graph (leaf or detached)")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)

    flows: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}

    def flow(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        cur = flows.get(t._id)
        flows[t._id] = g if cur is None else cur + g

    for t in nodes:
        g = flows.pop(t._id, None)
        if g is None:
            continue
        if t._backward is not None:
            t._backward(g, flow)
        else:
            t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckEntry:
    """Result for one differentiable input of the checked function."""

    index: int
    max_rel_error: float
    ok: bool


@dataclass
class GradCheckReport:
    """Per-input comparison of backward against central differences."""

    entries: list[GradCheckEntry] = field(default_factory=list)
    h: float = 1e-5
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self) -> str:
        parts = [
            f"input[{e.index}] max_rel={e.max_rel_error:.3e} {'ok' if e.ok else 'FAIL'}"
            for e in self.entries
        ]
        return "; ".join(parts) or "no differentiable inputs"


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of scalar-valued ``f`` with central differences.

    ``f`` must be a pure function of ``inputs`` (rebuilding its graph on each
    call).  Every element of every requires_grad input is perturbed by +-h and
    the relative error |ad - fd| / max(|ad|, |fd|, 1e-6) is reported; inputs
    with requires_grad=False are left out of the report.  Failures are
    reported, never raised.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise NotScalar("grad_check needs a scalar-valued function")
    backward(out)

    report = GradCheckReport(h=h, tol=tol)
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        g_fd = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        fd = g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-6)
        rel = float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
        report.entries.append(GradCheckEntry(index=idx, max_rel_error=rel, ok=rel < tol))
    return report
