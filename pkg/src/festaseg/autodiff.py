"""Small dense tensor with reverse-mode automatic differentiation.

Only the operations needed by the segmentation network and its losses are
provided.  Spatial operations work on ``[H, W, C]`` tensors or on batched
``[B, H, W, C]`` tensors.  Every operation that touches a tensor with
``requires_grad`` records a node on the tape; :meth:`Tensor.backward` replays
the adjoints of those nodes in exact reverse execution order.

Float32 is the working precision for training; pass float64 arrays to get
64-bit tensors (used by :func:`gradcheck`).
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, ParameterError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class _Node:
    __slots__ = ("seq", "op", "parents", "adjoint", "consumed")

    def __init__(self, op: str, parents: tuple, adjoint: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.adjoint = adjoint
        self.consumed = False


class Tensor:
    """Dense float array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self, grad=None) -> list[str]:
        """Accumulate gradients into every reachable tensor.

        Returns the names of the replayed operations, in replay order.
        A graph can only be replayed once.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        nodes, tensors = _collect(self)
        if any(n.consumed for n in nodes):
            raise GraphError("graph already consumed by a previous backward(); run a new forward pass")

        grads: dict[int, np.ndarray] = {id(self): grad}
        trace = []
        for out, node in sorted(((t, t._node) for t in tensors if t._node is not None),
                                key=lambda pair: -pair[1].seq):
            g = grads.get(id(out))
            trace.append(node.op)
            if g is None:
                continue
            parent_grads = node.adjoint(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for t in tensors:
            if not t.requires_grad:
                continue
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
        for n in nodes:
            n.consumed = True
            n.adjoint = None
        return trace


def _collect(root: Tensor) -> tuple[list[_Node], list[Tensor]]:
    seen: set[int] = set()
    tensors: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        tensors.append(t)
        if t._node is not None:
            stack.extend(t._node.parents)
    nodes = [t._node for t in tensors if t._node is not None]
    return nodes, tensors


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, adjoint: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, adjoint)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} differ")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    out = np.where(mask, a.data, a.dtype.type(floor))
    return _result(out, "clamp_min", (a,), lambda g: (g * mask,))


# -- reductions and indexing ---------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype)
        return _result(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = axis % a.ndim
    out = a.data.sum(axis=axis)
    return _result(out, "sum", (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the adjoint."""
    out = np.array(a.data[index], dtype=a.dtype)

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, "take", (a,), adjoint)


def norm(a: Tensor, eps: float = 0.0) -> Tensor:
    """L2 norm along the last axis; zero vectors get a zero subgradient."""
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def adjoint(g):
        safe = np.where(n > 0, n, 1)
        return ((g / safe * (n > 0))[..., None] * a.data,)

    return _result(n.astype(a.dtype), "norm", (a,), adjoint)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def adjoint(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, "log_softmax", (a,), adjoint)


# -- spatial ops ---------------------------------------------------------------

def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected [H,W,C] or [B,H,W,C], got dims {list(x.shape)}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``kernel`` is ``[k, k, Cin, Cout]`` with k in {1, 3}; ``bias`` is ``[Cout]``.
    """
    xb, squeeze = _as_batch(x.data, "conv2d")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be [3,3,Cin,Cout] or [1,1,Cin,Cout], got {kernel.dims}")
    k, _, cin, cout = kernel.shape
    if xb.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {xb.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias dims {bias.dims} do not match Cout={cout}")
    B, H, W, _ = xb.shape
    wmat = kernel.data.reshape(k * k * cin, cout)
    if k == 1:
        cols = xb.reshape(B * H * W, cin)
    else:
        xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # window axes come last: [B, H, W, Cin, 3, 3] -> [B, H, W, 3, 3, Cin]
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        cols = cols.reshape(B * H * W, 9 * cin)
    out = (cols @ wmat + bias.data).reshape(B, H, W, cout)
    if squeeze:
        out = out[0]

    def adjoint(g):
        gm = g.reshape(B * H * W, cout)
        gk = (cols.T @ gm).reshape(kernel.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = gm @ wmat.T
            if k == 1:
                gx = gcols.reshape(B, H, W, cin)
            else:
                gcols = gcols.reshape(B, H, W, 3, 3, cin)
                gxp = np.zeros((B, H + 2, W + 2, cin), dtype=gm.dtype)
                for di in range(3):
                    for dj in range(3):
                        gxp[:, di:di + H, dj:dj + W, :] += gcols[:, :, :, di, dj, :]
                gx = gxp[:, 1:-1, 1:-1, :]
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    return _result(out, "conv2d", (x, kernel, bias), adjoint)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route the gradient to the first
    window element in row-major order."""
    xb, squeeze = _as_batch(x.data, "maxpool2")
    B, H, W, C = xb.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial dims {H}x{W} must be even")
    win = xb.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def adjoint(g):
        gb = g[None] if squeeze else g
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], gb[..., None], axis=-1)
        gx = gwin.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx[0] if squeeze else gx,)

    return _result(out, "maxpool2", (x,), adjoint)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix ``[factor*n_in, n_in]`` with half-pixel centers,
    clamped to the borders."""
    n_out = n_in * factor
    pos = (np.arange(n_out) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4, 8):
        raise ParameterError(f"upsample_bilinear: factor must be 2, 4 or 8, got {factor}")
    xb, squeeze = _as_batch(x.data, "upsample_bilinear")
    B, H, W, C = xb.shape
    ah = bilinear_matrix(H, factor, x.dtype)
    aw = bilinear_matrix(W, factor, x.dtype)
    out = np.einsum("ph,bhwc->bpwc", ah, xb)
    out = np.einsum("qw,bpwc->bpqc", aw, out)
    if squeeze:
        out = out[0]

    def adjoint(g):
        gb = g[None] if squeeze else g
        gx = np.einsum("qw,bpqc->bpwc", aw, gb)
        gx = np.einsum("ph,bpwc->bhwc", ah, gx)
        return (gx[0] if squeeze else gx,)

    return _result(np.ascontiguousarray(out), "upsample_bilinear", (x,), adjoint)


# -- verification --------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: list[float]
    checked: list[int]
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
              step: float = 1e-4, samples: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients of a scalar closure with central differences.

    The relative error of an input is ``max|analytic - numeric|`` divided by
    the largest gradient magnitude seen on that input.  ``samples`` limits the
    number of perturbed coordinates per input (chosen with ``seed``).
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise UsageError(f"gradcheck: closure must return a scalar, got dims {out.dims}")
    out.backward()
    rng = np.random.default_rng(seed)
    errors, counts = [], []
    for t in inputs:
        if not t.requires_grad:
            errors.append(0.0)
            counts.append(0)
            continue
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for n, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + step
                f_plus = float(fn(*inputs).data.reshape(-1)[0])
                flat[c] = orig - step
                f_minus = float(fn(*inputs).data.reshape(-1)[0])
                flat[c] = orig
                numeric[n] = (f_plus - f_minus) / (2 * step)
        a = analytic[coords].astype(np.float64)
        scale_ = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(a - numeric).max(initial=0.0) / scale_))
        counts.append(len(coords))
    return GradcheckReport(errors, counts, tolerance)
