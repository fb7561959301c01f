"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record ``(inputs, output, rule)`` to
the active :class:`Tape`. :func:`backward` replays those records in reverse
execution order and accumulates vector-Jacobian products into the ``grad``
buffers of the leaves that asked for them.

Only operations with at least one input that requires gradients are recorded,
so constant subgraphs (measured data, dictionaries) cost nothing on the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "current_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "relu",
    "leaky_relu",
    "softplus",
    "soft_threshold",
    "conv2d",
    "avg_pool2",
    "upsample2",
    "concat",
    "reshape",
    "permute",
    "linear_map",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axis."""


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = f(params)
        backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.pop()

    def record(self, inputs, output, rule) -> None:
        output._tape = self
        output._index = len(self.records)
        self.records.append((inputs, output, rule))

    def reset(self) -> None:
        self.records.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = [Tape()]
        self.enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    return _state().tapes[-1]


def grad_enabled() -> bool:
    return _state().enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], rule) -> Tensor:
    """Wrap ``data`` and record it if any input participates in the graph."""
    out = Tensor(data)
    if _state().enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(tuple(inputs), out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Gradients accumulate across calls; call ``zero_grad`` on leaves to reset.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._index >= len(tape.records) or tape.records[loss._index][1] is not loss:
        raise RuntimeError("loss was not produced on an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for inputs, out, rule in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = rule(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), rule)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    shape = a.shape
    return _make(a.data.mean(), (a,), lambda g: (np.full(shape, g / n),))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def softplus(a) -> Tensor:
    """``log(1 + exp(x))``; returns ``x`` itself above 30."""
    a = _as_tensor(a)
    x = a.data
    big = x > 30.0
    xs = np.where(big, 0.0, x)
    out = np.where(big, x, np.log1p(np.exp(xs)))
    # derivative is the logistic function
    sig = np.where(big, 1.0, 1.0 / (1.0 + np.exp(-xs)))
    return _make(out, (a,), lambda g: (g * sig,))


def soft_threshold(x, tau) -> Tensor:
    """Proximal map of ``tau * |.|``: ``sign(x) * max(|x| - tau, 0)``.

    ``tau`` broadcasts against ``x``. At the kink ``|x| == tau`` the zero
    subgradient is used for both arguments.
    """
    x, tau = _as_tensor(x), _as_tensor(tau)
    if np.any(tau.data < 0):
        raise ValueError("soft_threshold: threshold must be nonnegative")
    xd, td = x.data, tau.data
    active = np.abs(xd) > td
    sgn = np.sign(xd)
    out = np.where(active, xd - sgn * td, 0.0)

    def rule(g):
        gx = np.where(active, g, 0.0)
        gt = _unbroadcast(np.where(active, -sgn * g, 0.0), td.shape)
        return gx, gt

    return _make(out, (x, tau), rule)


# -- convolution / resampling --------------------------------------------------


def _check_conv(xd: np.ndarray, wd: np.ndarray, circular: bool) -> None:
    if wd.ndim != 4:
        raise ShapeError(f"kernels must be 4D (C_out, C_in, k, k), got ndim={wd.ndim}")
    if xd.ndim != 4:
        raise ShapeError(f"input must be (N, C, H, W) or (C, H, W), got ndim={xd.ndim}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"channel axis mismatch: input has {xd.shape[1]} channels, kernels expect {wd.shape[1]}"
        )
    kh, kw = wd.shape[2:]
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel spatial axes must be equal and odd, got {kh}x{kw}")
    if not circular:
        return
    # wrap padding folds back at most one period
    if xd.shape[2] < kh:
        raise ShapeError(f"height axis {xd.shape[2]} smaller than kernel {kh}")
    if xd.shape[3] < kw:
        raise ShapeError(f"width axis {xd.shape[3]} smaller than kernel {kw}")


def conv2d(x, kernels, bias=None, padding: str = "zero") -> Tensor:
    """Same-size 2D convolution (true convolution, kernel centered).

    ``out[n, o, y, x] = sum_{c,i,j} w[o, c, i, j] * in[n, c, y - i + r, x - j + r]``
    with ``r = k // 2``, so a centered unit impulse kernel is the identity.
    ``padding`` is ``"zero"`` or ``"circular"``. A 3D input ``(C, H, W)`` is
    treated as a batch of one and returned as 3D.
    """
    if padding not in ("zero", "circular"):
        raise ValueError(f"unknown padding mode {padding!r}")
    x, w = _as_tensor(x), _as_tensor(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    _check_conv(xd, wd, padding == "circular")
    n, c, h, wdt = xd.shape
    o, _, k, _ = wd.shape
    r = k // 2
    mode = "wrap" if padding == "circular" else "constant"
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)), mode=mode) if r else xd
    # flipped kernel turns the correlation loop into a convolution
    wf = wd[:, :, ::-1, ::-1]
    out = np.zeros((n, o, h, wdt))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + h, j : j + wdt]
            out += np.einsum("nchw,oc->nohw", patch, wf[:, :, i, j], optimize=True)
    inputs = [x, w]
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        if b.shape != (o,):
            raise ShapeError(f"bias axis 0 has {b.shape}, expected ({o},)")
        out += b.data[None, :, None, None]
        inputs.append(b)

    def rule(g):
        g4 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + wdt] += np.einsum(
                        "nohw,oc->nchw", g4, wf[:, :, i, j], optimize=True
                    )
            if r == 0:
                gx = gxp
            elif padding == "zero":
                gx = gxp[:, :, r:-r, r:-r]
            else:
                gx = _fold_wrap(gxp, r, h, wdt)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gwf = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i : i + h, j : j + wdt]
                    gwf[:, :, i, j] = np.einsum("nohw,nchw->oc", g4, patch, optimize=True)
            gw = gwf[:, :, ::-1, ::-1]
        if b is not None and b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out[0] if squeeze else out, inputs, rule)


def _fold_wrap(gp: np.ndarray, r: int, h: int, w: int) -> np.ndarray:
    """Adjoint of circular padding by ``r`` on the last two axes."""
    g = gp.copy()
    g[..., r : 2 * r, :] += g[..., h + r :, :]
    g[..., h : h + r, :] += g[..., :r, :]
    g[..., :, r : 2 * r] += g[..., :, w + r :]
    g[..., :, w : w + r] += g[..., :, :r]
    return g[..., r : h + r, r : w + r]


def avg_pool2(x) -> Tensor:
    """2x2 average pooling over the last two axes (sizes must be even)."""
    x = _as_tensor(x)
    *lead, h, w = x.shape
    if h % 2:
        raise ShapeError(f"height axis {h} is odd")
    if w % 2:
        raise ShapeError(f"width axis {w} is odd")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _make(out, (x,), rule)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = _as_tensor(x)
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def rule(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), rule)


# -- shape ---------------------------------------------------------------------


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("concat: operands differ in ndim")
        for d, (p, q) in enumerate(zip(ref, t.shape)):
            if d != ax and p != q:
                raise ShapeError(f"concat: axis {d} mismatch ({p} vs {q})")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make(out, xs, lambda g: tuple(np.split(g, sizes, axis=ax)))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def linear_map(x, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed linear operator whose adjoint is supplied by the caller."""
    x = _as_tensor(x)
    return _make(forward(x.data), (x,), lambda g: (adjoint(g),))
