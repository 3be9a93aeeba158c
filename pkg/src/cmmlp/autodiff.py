"""Dense tensors with define-by-run reverse-mode differentiation.

Every library operation returns a :class:`Tensor` that remembers its parents
and a closure mapping the upstream gradient to per-parent gradients.  Calling
:func:`forward` on a :class:`Graph` records such a tape; :func:`backward`
walks it in reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

PRECISIONS = {"train": np.float32, "wide": np.float64}

_precision: contextvars.ContextVar[str] = contextvars.ContextVar("precision", default="train")


class ShapeError(ValueError):
    pass


class BindingError(KeyError):
    pass


@contextlib.contextmanager
def precision(name: str):
    """Select the float precision used for new tensors inside the block."""
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    token = _precision.set(name)
    try:
        yield PRECISIONS[name]
    finally:
        _precision.reset(token)


def default_dtype():
    return PRECISIONS[_precision.get()]


class Tensor:
    """An immutable n-d array node in the recorded graph."""

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only defined by a python scalar")
        return scale(self, 1.0 / other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# broadcasting: scalar-with-tensor, (C,1,1) bias and (1,H,W) masks over (C,H,W)

def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or math.prod(a) == 1 or math.prod(b) == 1:
        return True
    if len(a) == len(b) == 3:
        for small, big in ((a, b), (b, a)):
            if small == (big[0], 1, 1) or small == (1, big[1], big[2]):
                return True
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"unsupported broadcast between {a.shape} and {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b under the same broadcasting rules as :func:`mul`."""
    a, b = _binary_operands(a, b)
    q = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)

    return record(q, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy of sigmoid(logits) against a constant target."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {z.shape}")
    val = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return record(val, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), bw, "softmax")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(shape)
    return record(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
                i != axis % len(ref) and n != m for i, (n, m) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat shape mismatch: {t.shape} vs {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record(x.data[idx], (x,), bw, "take")


@lru_cache(maxsize=None)
def _einsum_plan(spec: str, n: int):
    lhs, out = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n:
        raise ValueError(f"einsum spec {spec!r} expects {len(ins)} operands, got {n}")
    plans = []
    for i, sub_i in enumerate(ins):
        if len(set(sub_i)) != len(sub_i):
            raise ValueError(f"repeated index within operand {sub_i!r} is not supported")
        others = [s for j, s in enumerate(ins) if j != i]
        avail = set(out).union(*others) if others else set(out)
        if not set(sub_i) <= avail:
            raise ValueError(f"index of {sub_i!r} is summed away alone; use sum_all instead")
        plans.append(",".join([out] + others) + "->" + sub_i)
    return plans


def einsum(spec: str, *xs: Tensor) -> Tensor:
    """Differentiable einsum without diagonal or lone-summed indices."""
    plans = _einsum_plan(spec, len(xs))
    data = np.einsum(spec, *[t.data for t in xs], optimize=len(xs) > 2)

    def bw(g):
        grads = []
        for i, plan in enumerate(plans):
            if not xs[i].requires_grad:
                grads.append(None)
                continue
            others = [t.data for j, t in enumerate(xs) if j != i]
            grads.append(np.einsum(plan, g, *others, optimize=len(others) > 1))
        return tuple(grads)

    return record(np.asarray(data), xs, bw, "einsum")


# ---------------------------------------------------------------------------
# convolution and resampling on single (C,H,W) maps

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,k,k) weight, got {x.shape}, {w.shape}")
    C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, weight {w.shape}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be {Ho}x{Wo} for input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(C * k * k, Ho * Wo)
    w2 = w.data.reshape(O, C * k * k)
    out = w2 @ cols
    if b is not None:
        out += b.data.reshape(O, 1)
    out = out.reshape(O, Ho, Wo)

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1).reshape(b.shape) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k, k, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bw, "conv2d")


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    out = m.astype(dtype_name)
    out.flags.writeable = False
    return out


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    C, H, W = x.shape
    Ho, Wo = size
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"resize target must be positive, got {size}")
    if (Ho, Wo) == (H, W):
        return x
    ry = interp_matrix(H, Ho, x.dtype.name)
    rx = interp_matrix(W, Wo, x.dtype.name)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return record(out, (x,), bw, "resize")


# ---------------------------------------------------------------------------
# tape traversal

def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """d(output)/d(t) for each t in ``wrt``; zeros where ``output`` does not depend on t."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones(output.shape, dtype=output.dtype)
        for node in reversed(_topological(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if node._parents:
                for p, gp in zip(node._parents, node._backward(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = gp if prev is None else prev + gp
                del grads[id(node)]
    return [np.ascontiguousarray(grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)))
            .astype(t.dtype, copy=False) for t in wrt]


# ---------------------------------------------------------------------------
# graphs over named leaves

class Graph:
    """A define-by-run computation over named leaves.

    ``fn`` receives the leaf tensors as keyword arguments and returns a Tensor.
    ``requires_grad`` lists the leaves to differentiate (default: all).
    """

    def __init__(self, fn: Callable[..., Tensor], leaves: Mapping[str, Sequence[int]],
                 requires_grad: Iterable[str] | None = None):
        self.fn = fn
        self.leaf_shapes = {k: tuple(v) for k, v in leaves.items()}
        self.grad_leaves = set(self.leaf_shapes if requires_grad is None else requires_grad)
        unknown = self.grad_leaves - set(self.leaf_shapes)
        if unknown:
            raise BindingError(f"requires_grad names unknown leaves: {sorted(unknown)}")
        self.leaves: dict[str, Tensor] = {}
        self.output: Tensor | None = None

    @classmethod
    def from_bindings(cls, fn, bindings: Mapping[str, np.ndarray], requires_grad=None) -> "Graph":
        return cls(fn, {k: np.shape(v) for k, v in bindings.items()}, requires_grad)


def forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Tensor:
    """Record ``graph`` on fresh leaves built from ``bindings`` and return its output."""
    leaves = {}
    for name, shape in graph.leaf_shapes.items():
        if name not in bindings:
            raise BindingError(f"missing binding for leaf {name!r}")
        arr = np.asarray(bindings[name])
        if arr.shape != shape:
            raise ShapeError(f"leaf {name!r} expects shape {shape}, got {arr.shape}")
        leaves[name] = Tensor(arr, requires_grad=name in graph.grad_leaves, name=name,
                              dtype=default_dtype())
    out = graph.fn(**leaves)
    if not isinstance(out, Tensor):
        raise TypeError(f"graph function returned {type(out).__name__}, expected Tensor")
    graph.leaves = leaves
    graph.output = out
    return out


def backward(graph: Graph, output: Tensor | None = None) -> dict[str, np.ndarray]:
    if output is None:
        output = graph.output
    if output is None:
        raise RuntimeError("forward has not been evaluated on this graph")
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    names = sorted(graph.grad_leaves)
    grads = gradients(output, [graph.leaves[n] for n in names])
    return dict(zip(names, grads))


@dataclass
class GradcheckReport:
    leaf: str
    max_rel_err: float
    tolerance: float
    checked: int
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.leaf}: max_rel_err={self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} elements)")


def gradcheck(graph: Graph, bindings: Mapping[str, np.ndarray], leaf: str,
              tolerance: float = 1e-6, eps_floor: float = 1e-4,
              max_elements: int | None = None, seed: int = 0,
              analytic_precision: str = "wide") -> GradcheckReport:
    """Compare backward gradients of ``leaf`` with central finite differences.

    Finite differences always run in wide precision; ``analytic_precision``
    selects the precision of the backward pass being checked.  The relative error per element is
    ``|a - n| / max(|a|, |n|, eps_floor)``.  ``max_elements`` checks a seeded
    random subset of coordinates instead of all of them.
    """
    with precision("wide"):
        base = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
        out = forward(graph, base)
        if out.size != 1:
            raise ShapeError(f"gradcheck needs a scalar output, got shape {out.shape}")
        names = sorted(graph.grad_leaves)
        if leaf not in names:
            raise BindingError(f"leaf {leaf!r} is not differentiated by this graph")
        if analytic_precision == "wide":
            analytic = backward(graph, out)[leaf].reshape(-1)
        else:
            with precision(analytic_precision):
                analytic = backward(graph, forward(graph, bindings))[leaf].reshape(-1)
            analytic = analytic.astype(np.float64)

        x0 = base[leaf].reshape(-1)
        coords = np.arange(x0.size)
        if max_elements is not None and x0.size > max_elements:
            coords = np.sort(np.random.default_rng(seed).choice(x0.size, max_elements, replace=False))
        eps3 = np.finfo(np.float64).eps ** (1.0 / 3.0)
        worst = 0.0
        for idx in coords:
            h = eps3 * max(1.0, abs(x0[idx]))
            vals = []
            for sign in (1.0, -1.0):
                xp = x0.copy()
                xp[idx] += sign * h
                vals.append(forward(graph, {**base, leaf: xp.reshape(base[leaf].shape)}).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), eps_floor)
            worst = max(worst, err)
    return GradcheckReport(leaf, float(worst), tolerance, int(coords.size), bool(worst < tolerance))


def gradcheck_all(graph: Graph, bindings: Mapping[str, np.ndarray], tolerance: float = 1e-6,
                  **kwargs) -> list[GradcheckReport]:
    return [gradcheck(graph, bindings, name, tolerance, **kwargs) for name in sorted(graph.grad_leaves)]

