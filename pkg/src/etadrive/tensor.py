"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are only recorded while a :class:`GradTape` is active on the
current thread, so inference code pays no bookkeeping cost::

    with GradTape() as tape:
        loss = (w * x).sum()
    grads = tape.backward(loss)      # {w: ndarray, ...}

Broadcasting in binary ops is deliberately narrow: equal shapes, a scalar
operand, or one shape being a trailing suffix of the other. Anything else
raises :class:`DimensionError`; use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LN_EPS = 1e-5
GELU_ALPHA = 1.702

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "stopped", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.stopped = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = " grad" if self.requires_grad else (" stopgrad" if self.stopped else "")
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_grad(x: Tensor) -> Tensor:
    """Gradient-opaque view of ``x``; backward contribution through it is zero."""
    out = Tensor.__new__(Tensor)
    out.data = as_tensor(x).data
    out.requires_grad = False
    out.stopped = True
    out.name = getattr(x, "name", None)
    return out


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    Nodes are appended in execution order, which is a topological order of
    the graph, so the backward sweep is a single reversed walk.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, op, out, inputs, backward) -> None:
        self.nodes.append(_Node(op, out, inputs, backward))

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``root`` with respect to every leaf that needs them.

        Returns a dict keyed by the leaf tensors. Leaves that ``root`` does not
        depend on are absent (their gradient is zero).
        """
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if not root.requires_grad:
            return {}
        grads[id(root)] = np.ones_like(root.data)
        produced = {id(n.out) for n in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return {leaves[k]: g for k, g in grads.items() if k in leaves}


def backward(tape: GradTape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


@contextmanager
def no_grad():
    """Suspend recording on this thread, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# ---------------------------------------------------------------------------
# op plumbing


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.stopped = False
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, out, inputs, bwd)
    else:
        out.requires_grad = False
    return out


def _is_scalar(shape: tuple[int, ...]) -> bool:
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly unless one operand is 2-d, in
    which case it is shared across the other's batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: fold the batch into rows, one GEMM each way
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bwd_shared(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(lead + (bd.shape[-1],)), (a, b), bwd_shared, "matmul")

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ga.shape != ad.shape:
            ga = ga.reshape((-1,) + ad.shape).sum(axis=0)
        if gb.shape != bd.shape:
            gb = gb.reshape((-1,) + bd.shape).sum(axis=0)
        return ga, gb

    return _make(ad @ bd, (a, b), bwd, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {src} -> {tuple(shape)}: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def bwd(g):
        full = np.zeros(src)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bwd, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat along {axis}: shapes {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand {a.shape} -> {shape}") from None
    src = a.shape

    def bwd(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bwd, "expand")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([src[i] for i in axes]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bwd, "mean")


def tmax(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first arg-max."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    src = a.shape

    def bwd(g):
        full = np.zeros(src)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bwd, "max")


# ---------------------------------------------------------------------------
# elementwise unary


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(a) -> Tensor:
    """Smooth activation x * sigmoid(1.702 x)."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(GELU_ALPHA * x)
    return _make(x * s, (a,),
                 lambda g: (g * (s + GELU_ALPHA * x * s * (1.0 - s)),), "gelu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in the overflow-free form max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _make(out, (a,), lambda g: (g * s,), "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bwd, "softmax")


def layer_norm(a, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[-1]

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), bwd, "layer_norm")


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over the last two axes (fused op).

    q: (..., Nq, d), k: (..., Nk, d), v: (..., Nk, dv) with equal leading axes.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)

    def bwd(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ g
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _make(p @ vd, (q, k, v), bwd, "attention")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_err.items() if v >= self.tolerance}


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-4,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``coords_per_param`` samples that many coordinates per tensor instead
    of checking all of them.
    """
    with GradTape() as tape:
        root = f()
    if root.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    grads = tape.backward(root)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        n = p.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        original = p.data
        worst = 0.0
        for c in coords:
            flat = original.reshape(-1).copy()
            flat[c] += step
            p.data = flat.reshape(original.shape)
            fp = f().item()
            flat[c] -= 2 * step
            p.data = flat.reshape(original.shape)
            fm = f().item()
            p.data = original
            num = (fp - fm) / (2 * step)
            a = analytic[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, tolerance)


# ---------------------------------------------------------------------------
# parameter serialization

MAGIC = b"ETA1"
FORMAT_VERSION = 1


def save_params(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays as ``ETA1`` + version byte + one block per array.

    Block layout (little-endian): u32 name length, utf-8 name, u32 rank,
    u64 extent per axis, then float64 values in row-major order.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([FORMAT_VERSION]))
        for name, value in params.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an ETA1 parameter file")
    if blob[4] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {blob[4]}")
    pos = 5
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out
