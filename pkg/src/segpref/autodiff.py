"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`. Outside a tape,
the same functions run as plain numpy forward passes, which is how inference
and finite-difference probing avoid graph bookkeeping.

    with Tape() as tape:
        loss = sum_(mul(x, x))
    grads = backward(tape, loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Operator inputs with incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(other, pow_(self, -1.0))

    def __pow__(self, exponent: float):
        return pow_(self, exponent)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; used as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    _produced: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _finite(kind: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{kind}: produced non-finite values")
    return arr


def _emit(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = _finite(kind, out)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(kind, inputs, result, bwd))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if p < 0 and np.any(a.data == 0):
        raise FloatingPointError("pow: negative exponent of zero")
    out = np.power(a.data, p)

    def bwd(g):
        if p == 0:
            return (np.zeros_like(g),)
        return (g * p * np.power(a.data, p - 1),)

    return _emit("pow", out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _emit("softplus", out, (a,), lambda g: (g * expit(a.data),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", x * cdf, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError(f"log: non-positive input (min {a.data.min():.3g}); clamp first")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the interval and is zero outside."""
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _emit("sum", out, (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return _emit("mean", out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """x @ w.T + b, with x of shape (..., in) and w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = g @ w.data
        gw = g2.T @ x.data.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, bwd)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1, stride 1 or 2. x: (N, C, H, W)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    wmat = w.data.reshape(o, c * 9)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        go = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (go.T @ cols).reshape(w.shape)
        dcols = (go @ wmat).reshape(n, ho, wo, c, 3, 3)
        dxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                    :, :, :, :, ki, kj
                ].transpose(0, 3, 1, 2)
        gx = dxp[:, :, 1:-1, 1:-1]
        if b is None:
            return gx, gw
        return gx, gw, go.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, bwd)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes of (N, C, H, W)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"nearest-upsample-2x: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _emit("nearest-upsample-2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Returns the mapping leaf -> gradient contributed by this call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp not in tape:
                leaves[key] = inp
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = _finite("backward", np.asarray(grads[key], dtype=DTYPE).reshape(leaf.shape))
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- verification


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    failures: list[tuple[int, str]]
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list[BlockReport]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    def summary(self) -> str:
        lines = [f"{'block':<24} {'checked':>7} {'max_rel':>10} {'max_abs':>10}  ok"]
        for b in self.blocks:
            lines.append(
                f"{b.name:<24} {b.checked:>7} {b.max_rel_error:>10.2e} {b.max_abs_error:>10.2e}  "
                f"{'yes' if b.passed else 'NO'}"
            )
        return "\n".join(lines)


def _value(t) -> float:
    if isinstance(t, Tensor):
        return t.item()
    return float(t)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    abs_floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the parameter tensors in ``params``;
    coordinates are perturbed in place and restored. Relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``, so gradients smaller than
    ``abs_floor`` are effectively compared in absolute terms. With
    ``max_coords`` set, that many coordinates per block are sampled.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    if loss in tape:
        backward(tape, loss)
    rng = np.random.default_rng(seed)
    blocks = []
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        max_rel = max_abs = 0.0
        failures = []
        for i in idx:
            orig = flat[i]
            try:
                flat[i] = orig + step
                fp = _value(f())
                flat[i] = orig - step
                fm = _value(f())
            except (FloatingPointError, ValueError) as exc:
                failures.append((int(i), str(exc)))
                continue
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append((int(i), "non-finite evaluation"))
                continue
            numeric = (fp - fm) / (2 * step)
            err = abs(analytic[i] - numeric)
            rel = err / max(abs(analytic[i]), abs(numeric), abs_floor)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
        blocks.append(
            BlockReport(name, max_rel, max_abs, len(idx), failures, not failures and max_rel < tolerance)
        )
    return GradCheckReport(blocks, tolerance)
