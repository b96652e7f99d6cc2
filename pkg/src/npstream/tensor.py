"""Dense tensors with an explicit tape for reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations on tensors that
belong to a :class:`GradTape` are recorded on that tape; operations on
untaped tensors run forward only. There is no global graph: a tape is created,
leaves are registered with :meth:`GradTape.watch`, and :meth:`GradTape.backward`
is called once per tape.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class TensorError(Exception):
    """Base class for errors raised by the tensor core."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class DegenerateRowError(TensorError, ValueError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "index", "grad")
    __array_priority__ = 100.0

    def __init__(self, data, dtype=None, *, tape: GradTape | None = None, index: int = -1):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.tape = tape
        self.index = index
        self.grad: np.ndarray | None = None

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

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        taped = ", taped" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{taped})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradTape:
    """Ordered record of primitive ops.

    Nodes are appended as ops execute, so parents always precede children and
    a reverse sweep over the node list is a valid topological order.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._leaves: list[Tensor] = []
        self._done = False

    def __len__(self) -> int:
        return len(self._parents)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def watch(self, value, dtype=None) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its tensor."""
        if self._done:
            raise TapeError("tape already consumed by backward(); call reset() first")
        leaf = Tensor(value, dtype)
        leaf.tape = self
        leaf.index = len(self._parents)
        self._parents.append(())
        self._vjps.append(None)
        self._leaves.append(leaf)
        return leaf

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(value) for name, value in params.items()}

    def _record(self, out: np.ndarray, parents: Sequence, vjp: Callable) -> Tensor:
        if self._done:
            raise TapeError("tape already consumed by backward(); call reset() first")
        idx = tuple(p.index if isinstance(p, Tensor) and p.tape is self else -1 for p in parents)
        node = Tensor(out, out.dtype, tape=self, index=len(self._parents))
        self._parents.append(idx)
        self._vjps.append(vjp)
        return node

    def backward(self, loss: Tensor) -> list[np.ndarray]:
        """Propagate adjoints from a scalar ``loss`` to every watched leaf.

        Returns the leaf adjoints in registration order and stores each on the
        leaf's ``grad`` attribute. Leaves that do not influence the loss get
        zeros of matching shape.
        """
        if self._done:
            raise TapeError("backward() already called on this tape")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        adj: list[np.ndarray | None] = [None] * len(self._parents)
        adj[loss.index] = np.ones_like(loss.data)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            adj[i] = None  # interior adjoints are not needed once propagated
            grads = vjp(g)
            for pi, gp in zip(self._parents[i], grads):
                if pi < 0 or gp is None:
                    continue
                adj[pi] = gp if adj[pi] is None else adj[pi] + gp
        out = []
        for leaf in self._leaves:
            g = adj[leaf.index]
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            out.append(leaf.grad)
        self._done = True
        self._vjps = []
        return out

    def reset(self) -> None:
        """Drop all recorded nodes; previously watched leaves become detached."""
        for leaf in self._leaves:
            leaf.tape = None
            leaf.index = -1
        self._parents = []
        self._vjps = []
        self._leaves = []
        self._done = False


def _data(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype or DEFAULT_DTYPE)


def _common_dtype(*xs):
    """Tensors set the precision; otherwise the first float array does."""
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    for x in xs:
        if isinstance(x, np.ndarray) and x.dtype.kind == "f":
            return x.dtype
    return DEFAULT_DTYPE


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _emit(out: np.ndarray, parents: Sequence, vjp: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeError(f"{op}: operands recorded on different tapes")
    if tape is None:
        return Tensor(out, out.dtype)
    return tape._record(out, parents, vjp)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    sa, sb = ad.shape, bd.shape
    return _emit(ad + bd, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    sa, sb = ad.shape, bd.shape
    return _emit(ad - bd, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    return _emit(-_data(a), (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    ad = _data(a)
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_data(a))
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    ad = _data(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(_data(a))
    return _emit(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a) -> Tensor:
    ad = _data(a)
    pos = ad > 0
    return _emit(np.where(pos, ad, 0.0).astype(ad.dtype, copy=False), (a,), lambda g: (g * pos,), "relu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_array(x: np.ndarray) -> np.ndarray:
    # log1p(exp(-|x|)) + max(x, 0) never overflows
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(a) -> Tensor:
    out = sigmoid_array(_data(a))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    ad = _data(a)
    return _emit(softplus_array(ad), (a,), lambda g: (g * sigmoid_array(ad),), "softplus")


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# --- linear algebra and reductions ----------------------------------------


def matmul(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _emit(out, (a, b), vjp, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    axes = _norm_axes(axis, ad.ndim)
    out = ad.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape),)

    return _emit(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    axes = _norm_axes(axis, ad.ndim)
    count = int(np.prod([ad.shape[i] for i in axes])) if axes else 1
    return div(tsum(a, axes, keepdims), float(count))


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    return _emit(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    if axes is None:
        axes = tuple(reversed(range(ad.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(ad, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    axes = list(range(_data(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    ad = _data(a)

    def vjp(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(ad[idx]), (a,), vjp, "getitem")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    dt = _common_dtype(*xs)
    arrays = [_data(x, dt) for x in xs]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(xs), vjp, "concat")


def broadcast_to(a, shape) -> Tensor:
    ad = _data(a)
    return _emit(np.broadcast_to(ad, shape).copy(), (a,), lambda g: (unbroadcast(g, ad.shape),), "broadcast_to")


# --- composite primitives with fused backward ------------------------------


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``logits + mask`` along ``axis``.

    ``mask`` holds 0 for visible and -inf for hidden entries and is treated as
    a constant. Hidden entries come out exactly 0. A row with no visible
    entry raises :class:`DegenerateRowError`.
    """
    x = _data(logits)
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            z = x + m.astype(x.dtype, copy=False)
        except ValueError as exc:
            raise ShapeError(f"mask shape {m.shape} does not broadcast to logits {x.shape}") from exc
        visible = np.isfinite(np.broadcast_to(m, z.shape))
    else:
        z = x
        visible = None
    zmax = np.max(z, axis=axis, keepdims=True)
    if not np.isfinite(zmax).all():
        raise DegenerateRowError("softmax row has every entry masked")
    e = np.exp(z - zmax)
    if visible is not None:
        e = np.where(visible, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (logits,), vjp, "masked_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    xd = _data(x)
    gd, bd = _data(gain, xd.dtype), _data(bias, xd.dtype)
    if xd.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty feature axis")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    def vjp(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = unbroadcast(g * xhat, gd.shape)
        gbias = unbroadcast(g, bd.shape)
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), vjp, "layer_norm")


# --- gradient oracle --------------------------------------------------------


def _flatten(theta) -> tuple[list[str] | None, list[np.ndarray]]:
    if isinstance(theta, Mapping):
        names = list(theta.keys())
        return names, [np.asarray(theta[k], dtype=np.float64) for k in names]
    return None, [np.asarray(theta, dtype=np.float64)]


def _pack(names, arrays, wrap):
    if names is None:
        return wrap(arrays[0])
    return {k: wrap(v) for k, v in zip(names, arrays)}


def tape_gradient(f: Callable, theta) -> list[np.ndarray]:
    """Reverse-mode gradient of scalar ``f`` at ``theta`` (array or dict of arrays)."""
    names, arrays = _flatten(theta)
    tape = GradTape()
    leaves = [tape.watch(arr) for arr in arrays]
    loss = f(leaves[0] if names is None else dict(zip(names, leaves)))
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        return [np.zeros_like(arr) for arr in arrays]
    return tape.backward(loss)


def finite_diff_check(
    f: Callable,
    theta,
    h: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Largest relative disagreement between tape adjoints and central differences.

    ``f`` maps a tensor (or a dict of tensors, mirroring ``theta``) to a scalar
    tensor. Per coordinate the error is ``|ad - fd| / max(|ad|, |fd|, floor)``,
    so a constant ``f`` reports 0. The floor exists because central
    differences carry roundoff of order eps*|f|/h, which makes a pure relative
    error meaningless for gradients near that noise level.
    ``max_coords`` evaluates a random subset of coordinates for large
    parameter sets.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    names, arrays = _flatten(theta)
    grads = tape_gradient(f, theta)

    def evaluate(arrs):
        out = f(_pack(names, arrs, Tensor))
        return float(_data(out).reshape(-1)[0])

    coords = [(a, i) for a, arr in enumerate(arrays) for i in range(arr.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for a, i in coords:
        flat = arrays[a].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(arrays)
        flat[i] = orig - h
        fm = evaluate(arrays)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        ad = float(grads[a].reshape(-1)[i])
        if max(abs(ad), abs(fd)) < 1e-300:
            continue
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), floor))
    return worst
