"""Dense float64 tensors with reverse-mode gradients.

Only the operations the recognition pipeline needs are provided. Each op
computes its forward value with numpy and records a backward closure that
maps the output gradient to gradients for its inputs; ``Tensor.backward``
walks the recorded graph in reverse topological order.

Two ops deserve a note because they trade speed for exactness:

* :func:`matmul` computes every output entry as an independent dot product of
  one row of ``a`` with one column of ``b``. BLAS can give results for a row
  that depend on where the row sits in the matrix, which would break exact
  permutation equivariance over actors.
* :func:`sorted_matmul` and the row sums inside :func:`row_softmax` reduce over
  the actor axis after sorting the summands, so the result depends only on the
  multiset of terms and not on actor order.

Convolution follows the cross-correlation convention (the kernel is not
flipped). With learned kernels both conventions describe the same family of
maps.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "set_debug",
    "add",
    "mul",
    "matmul",
    "sorted_matmul",
    "conv2d",
    "relu",
    "exp",
    "row_softmax",
    "cross_entropy",
    "concat",
    "reshape",
    "max_rows",
    "mean_rows",
    "scale_grad",
    "ordered_sum",
    "grad_check",
    "GradRecord",
    "GradReport",
]


class _State(threading.local):
    grad_enabled = True


_state = _State()
_debug = os.environ.get("ARG_CORE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle the finite-value check that runs after every op."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, finite differences)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        if _debug and not np.isfinite(data).all():
            raise NumericError(f"non-finite output from op '{op}'")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        rg = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = rg
        out._parents = parents if rg else ()
        out._backward = backward if rg else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NumericError("division by zero")
    y = 1.0 / a.data
    return Tensor._from_op(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def relu(x: Tensor) -> Tensor:
    """max(0, x) with subgradient 0 at exactly 0."""
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,), "exp")


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by ``factor``.

    Used as fault injection when verifying that the gradient checker catches
    a broken backward pass.
    """
    return Tensor._from_op(x.data, (x,), lambda g: (g * factor,), "scale_grad")


# --------------------------------------------------------------- reductions


def ordered_sum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` after sorting, accumulating sequentially.

    The result depends only on the multiset of values along the axis, so it
    is bit-identical under any permutation of that axis.
    """
    s = np.sort(a, axis=axis)
    s = np.moveaxis(s, axis, 0)
    total = s[0].copy()
    for k in range(1, s.shape[0]):
        total += s[k]
    return total


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(y, dtype=np.float64), (x,), backward, "sum")


def max_rows(x: Tensor) -> Tensor:
    """Column-wise maximum over the rows of a 2-D tensor, shape (1, D)."""
    if x.ndim != 2:
        raise DimensionError(f"max_rows expects a 2-D tensor, got {x.shape}")
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    y = x.data[idx, cols][None, :]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[idx, cols] = g[0]
        return (gx,)

    return Tensor._from_op(y, (x,), backward, "max_rows")


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows, shape (1, D), summed in sorted order."""
    if x.ndim != 2:
        raise DimensionError(f"mean_rows expects a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    y = (ordered_sum(x.data, axis=0) / n)[None, :]
    shape = x.shape
    return Tensor._from_op(y, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean_rows")


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(y, tuple(tensors), backward, "concat")


# ------------------------------------------------------------------- linear


def _row_stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,kj->ik", np.ascontiguousarray(a), np.ascontiguousarray(b.T))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(_row_stable_matmul(ad, bd), (a, b), backward, "matmul")


def sorted_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where each inner sum is taken over sorted products.

    Permuting the inner index (together with the rows of ``b``) leaves every
    output entry bit-identical. Cost is O(m*k*n) memory, fine for actor
    counts in the tens.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"sorted_matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    y = ordered_sum(ad[:, :, None] * bd[None, :, :], axis=1)

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(y, (a, b), backward, "sorted_matmul")


# -------------------------------------------------------------- convolution


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is C_in x H x W or B x C_in x H x W; ``kernels`` is
    C_out x C_in x kh x kw. Output spatial size is
    ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected CxHxW input and 4-D kernels, got {x.shape}, {kernels.shape}")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = kernels.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernels expect {Ci} ({x.shape} vs {kernels.shape})")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernels.data.reshape(Co, -1)
    y = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y[0] if single else y)

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gmat.T @ cols).reshape(Co, Ci, kh, kw)
        if not x.requires_grad:
            return None, gw
        gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, Hp, Wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return (gx[0] if single else gx), gw

    return Tensor._from_op(y, (x, kernels), backward, "conv2d")


# ----------------------------------------------------------- softmax & loss


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along each row of a 2-D tensor.

    With ``mask`` (same shape, entries 0/1) the result is
    ``mask*exp(x) / sum(mask*exp(x))`` per row: masked entries are exactly 0
    and the per-row maximum is taken over unmasked entries only.
    """
    if x.ndim != 2:
        raise DimensionError(f"row_softmax expects a 2-D tensor, got {x.shape}")
    a = x.data
    if mask is None:
        e = np.exp(a - a.max(axis=1, keepdims=True))
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise DimensionError(f"row_softmax: mask shape {mask.shape} != input shape {a.shape}")
        if not mask.any(axis=1).all():
            raise NumericError("row_softmax: a row has no unmasked entries")
        m = np.where(mask, a, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, a - m, 0.0)), 0.0)
    y = e / ordered_sum(e, axis=1)[:, None]

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "row_softmax")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects m x c logits, got {logits.shape}")
    m, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != m:
        raise DimensionError(f"cross_entropy: {m} rows of logits but {labels.shape[0]} labels")
    for row, lab in enumerate(labels):
        if not 0 <= lab < c:
            raise DataError(f"cross_entropy: row {row} has label {int(lab)} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -logp[rows, labels].sum() / m

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / m),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


# ------------------------------------------------------------ gradient check


@dataclass
class GradRecord:
    name: str
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float


@dataclass
class GradReport:
    records: list = field(default_factory=list)
    epsilon: float = 1e-4
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(r.max_rel_error < self.tolerance for r in self.records)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.records), default=0.0)

    def failing(self) -> list:
        return [r.name for r in self.records if not r.max_rel_error < self.tolerance]

    def by_group(self, key: Callable[[str], str] | None = None) -> dict:
        """Worst relative error per parameter group, in first-seen order."""
        key = key or (lambda name: name.split(".")[0])
        out: dict = {}
        for r in self.records:
            g = key(r.name)
            out[g] = max(out.get(g, 0.0), r.max_rel_error)
        return out


def _named(params) -> list:
    if isinstance(params, Mapping):
        return list(params.items())
    items = list(params)
    if items and isinstance(items[0], Tensor):
        return [(f"p{i}", t) for i, t in enumerate(items)]
    return items


def relative_error(a, n) -> np.ndarray:
    """|a - n| / max(1, |a|, |n|), elementwise."""
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params,
    epsilon: float = 1e-4,
    *,
    max_coords: int = 24,
    seed: int = 0,
    tolerance: float = 1e-4,
    skip_near_zero: float | None = None,
) -> GradReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` is called with no arguments and must read the current values
    of ``params`` (a mapping name -> Tensor, or a list). Tensors larger than
    ``max_coords`` are sub-sampled with coordinates chosen from ``seed``.
    Coordinates whose parameter value lies within ``skip_near_zero`` of 0 are
    skipped (ReLU kinks).
    """
    if not epsilon > 0:
        raise ConfigError(f"grad_check: epsilon must be > 0, got {epsilon}")
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradReport(epsilon=epsilon, tolerance=tolerance)
    for name, p in named:
        analytic_full = np.zeros(p.shape) if p.grad is None else p.grad
        size = p.data.size
        if size <= max_coords:
            idx = np.arange(size)
        else:
            idx = np.sort(rng.choice(size, size=max_coords, replace=False))
        if skip_near_zero is not None:
            idx = idx[np.abs(p.data.reshape(-1)[idx]) >= skip_near_zero]
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        numeric = np.empty(len(idx))
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(loss_fn().data)
                flat[i] = orig - epsilon
                fm = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
                numeric[n] = (fp - fm) / (2.0 * epsilon)
        analytic = analytic_full.reshape(-1)[idx].copy()
        err = float(relative_error(analytic, numeric).max()) if len(idx) else 0.0
        report.records.append(GradRecord(name, idx, analytic, numeric, err))
    return report
