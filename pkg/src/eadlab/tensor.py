"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded only while a :class:`Tape` is active on the current
thread and at least one input participates (a leaf with ``requires_grad`` or
an output previously recorded on the same tape). Tensors coming from another
tape, or from no tape at all, are treated as constants; this is how beliefs
are detached between training windows.

Broadcasting is limited to scalar-with-tensor and equal shapes. Anything else
goes through :func:`expand`, whose backward sums over the expanded axes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    pass


class DimensionError(TensorError, ValueError):
    pass


class DomainError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward: Callable
    needs: tuple


@dataclass
class Tape:
    """Append-only record of differentiable operations."""

    nodes: list = field(default_factory=list)
    frozen: bool = False

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_tape():
    """Suspend recording on this thread."""
    prev = _active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.tape = None
        out.tape_id = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _raise_item():
    raise DimensionError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _participates(t: Tensor, tape: Tape) -> bool:
    if t.tape is tape:
        return True
    return t.requires_grad and t.tape is None


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.tape = None
    out.tape_id = None
    out.name = None
    tape = _active_tape()
    if tape is None or tape.frozen:
        return out
    needs = tuple(_participates(t, tape) for t in inputs)
    if not any(needs):
        return out
    out.tape = tape
    out.tape_id = len(tape.nodes)
    tape.nodes.append(_Node(out, tuple(inputs), backward, needs))
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not match; use expand()")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g, n: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g, n: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g, n):
        return (
            _reduce_to(g * bd, ad.shape) if n[0] else None,
            _reduce_to(g * ad, bd.shape) if n[1] else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def backward(g, n):
        return (
            _reduce_to(g / bd, ad.shape) if n[0] else None,
            _reduce_to(-g * out / bd, bd.shape) if n[1] else None,
        )

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, n: (-g,))


def _unary(a, fwd, dfdx) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(over="ignore", invalid="ignore"):
        y = fwd(x)
    return _make(y, (a,), lambda g, n: (g * dfdx(x, y),))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    return _unary(a, lambda x: 0.5 * (np.tanh(0.5 * x) + 1.0), lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive entry")
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def square(a) -> Tensor:
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the interval, zero outside."""
    a = as_tensor(a)
    x = a.data
    lo_arr = np.asarray(lo, dtype=np.float64)
    hi_arr = np.asarray(hi, dtype=np.float64)
    inside = (x >= lo_arr) & (x <= hi_arr)
    return _make(np.clip(x, lo_arr, hi_arr), (a,), lambda g, n: (g * inside,))


def clamp01(a) -> Tensor:
    return clip(a, 0.0, 1.0)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _binary_operands(a, b)
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(a.shape, b.shape)
    if mask.shape != shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {shape}")
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(
        out,
        (a, b),
        lambda g, n: (_reduce_to(g * mask, sa), _reduce_to(g * ~mask, sb)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g, n):
        return (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None)

    return _make(ad @ bd, (a, b), backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g, n):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g, n: (g.reshape(old),))


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules); backward sums back."""
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(old) if d == 1 and shape[i + lead] != 1
    )

    def backward(g, n):
        return (g.sum(axis=axes).reshape(old) if axes else g.reshape(old),)

    return _make(np.array(out), (a,), backward)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[idx])

    def backward(g, n):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward)


def scatter(values, idx, rows: int) -> Tensor:
    """Zeros with ``rows`` leading entries, row ``idx[k]`` set to ``values[k]``; ``idx`` must be unique."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != values.shape[:1] or (idx.size and (idx.min() < 0 or idx.max() >= rows)):
        raise DimensionError("scatter needs one in-range index per value row")
    if np.unique(idx).size != idx.size:
        raise DimensionError("scatter indices must be unique")
    out = np.zeros((rows,) + values.shape[1:])
    out[idx] = values.data

    def backward(g, n):
        return (g[idx],)

    return _make(out, (values,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, n):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g, n):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("logits must be B x C")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, ncls = logits.shape
    if labels.shape[0] != bsz:
        raise DimensionError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= ncls):
        raise IndexError("label out of range")
    logp = log_softmax(logits.data)
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def backward(g, n):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / bsz),)

    return _make(np.asarray(loss), (logits,), backward)


def bilinear_sample(image, coords, owner=None) -> Tensor:
    """Sample ``image`` at continuous (row, col) positions.

    ``image`` is H x W x C (or B x H x W x C), ``coords`` is H' x W' x 2 (or
    B' x H' x W' x 2). Integer coordinates hit texel centres exactly; texels
    outside the image read as zero. Differentiable in both arguments.
    ``owner`` (length B' ints) picks the image for each batched coordinate
    grid; by default grid i reads image i.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    batched = image.ndim == 4
    if image.ndim not in (3, 4) or coords.ndim != image.ndim or coords.shape[-1] != 2:
        raise DimensionError(f"bad shapes image={image.shape} coords={coords.shape}")
    img = image.data if batched else image.data[None]
    crd = coords.data if batched else coords.data[None]
    if owner is None:
        if img.shape[0] != crd.shape[0]:
            raise DimensionError("batch sizes differ")
        owner = np.arange(crd.shape[0])
    else:
        owner = np.asarray(owner, dtype=np.int64)
        if not batched or owner.shape != (crd.shape[0],) or owner.min() < 0 or owner.max() >= img.shape[0]:
            raise DimensionError("owner must index the image batch once per coordinate grid")
    nb, h, w, c = img.shape
    r, q = crd[..., 0], crd[..., 1]
    r0f, q0f = np.floor(r), np.floor(q)
    wr, wq = (r - r0f)[..., None], (q - q0f)[..., None]
    # a one-texel zero border stands in for out-of-range reads
    hp, wp = h + 2, w + 2
    flat = np.pad(img, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
    ri0 = np.clip(r0f, -1, h).astype(np.int64) + 1
    qi0 = np.clip(q0f, -1, w).astype(np.int64) + 1
    ri1 = np.clip(r0f + 1, -1, h).astype(np.int64) + 1
    qi1 = np.clip(q0f + 1, -1, w).astype(np.int64) + 1
    base = owner.reshape((-1,) + (1,) * (r.ndim - 1)) * hp
    row0, row1 = (base + ri0) * wp, (base + ri1) * wp
    lins = (row0 + qi0, row0 + qi1, row1 + qi0, row1 + qi1)
    v00, v01, v10, v11 = (np.take(flat, lin, axis=0) for lin in lins)
    top = v00 + wq * (v01 - v00)
    bot = v10 + wq * (v11 - v10)
    out = top + wr * (bot - top)

    def backward(g, n):
        gimg = gcrd = None
        if n[0]:
            keys = np.concatenate([lin.reshape(-1) for lin in lins])
            weights = ((1 - wr) * (1 - wq), (1 - wr) * wq, wr * (1 - wq), wr * wq)
            contrib = np.concatenate([(g * wt).reshape(-1, c) for wt in weights])
            acc = np.stack([np.bincount(keys, contrib[:, ch], minlength=nb * hp * wp) for ch in range(c)], axis=-1)
            gimg = acc.reshape(nb, hp, wp, c)[:, 1:-1, 1:-1]
            if not batched:
                gimg = gimg[0]
        if n[1]:
            d_r = bot - top
            d_q = (1 - wr) * (v01 - v00) + wr * (v11 - v10)
            gcrd = np.stack([(g * d_r).sum(-1), (g * d_q).sum(-1)], axis=-1)
            if not batched:
                gcrd = gcrd[0]
        return gimg, gcrd

    return _make(out if batched else out[0], (image, coords), backward)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter leaf reachable from ``loss``."""
    if loss.size != 1 or loss.ndim > 1:
        raise TapeError("backward requires a scalar loss")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape")
    if tape.frozen:
        raise TapeError("tape already consumed by a backward pass")
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for i in range(loss.tape_id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        pgrads = node.backward(g, node.needs)
        for parent, need, pg in zip(node.parents, node.needs, pgrads):
            if not need or pg is None:
                continue
            if parent.tape is tape:
                j = parent.tape_id
                grads[j] = grads[j] + pg if j in grads else pg
            elif parent.requires_grad:
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.frozen = True
    # recorded tensors point back at the tape; dropping the nodes frees the graph without a gc pass
    tape.nodes = []


def numerical_gradient(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps tensors to a scalar tensor; every input is differentiated.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [parameter(a) for a in arrays]
    with Tape():
        out = fn(*leaves)
        backward(out)

    def scalar():
        with no_tape():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = numerical_gradient(scalar, arr, h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(ana, num))
    return worst


def checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    digest = hashlib.sha256()
    for t in tensors:
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = _collect(self.params, grads)
        for p, g in zip(self.params, grads):
            if g is not None:
                p.data -= self.lr * g


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = _collect(self.params, grads)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _collect(params, grads):
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise DimensionError("params and grads are not aligned")
    return grads


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], optimizer: SGD | Adam) -> None:
    """Apply one in-place update; ``optimizer`` carries Adam moments between calls."""
    if list(optimizer.params) != list(params):
        raise DimensionError("optimizer was built for different parameters")
    optimizer.step(grads)
