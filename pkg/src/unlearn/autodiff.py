"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive checks whether a tape is active and whether any input
requires a gradient; if so it appends a record holding a closure that maps
the upstream gradient to input gradients.  ``backward`` replays the tape in
reverse.

    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)
    grads[x.node_id]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_active: list["Tape"] = []
_debug = False


def set_debug(flag: bool) -> None:
    """Raise FloatingPointError whenever a primitive produces NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


@dataclass
class Record:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if _active:
            raise RuntimeError("a tape is already recording")
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check(out: np.ndarray, op: str) -> None:
    if _debug and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    _check(out, op)
    tracked = bool(_active) and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        _active[-1].records.append(Record(op, ids, result.node_id, bwd))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# construction


def tensor_new(shape, init="zeros", *, seed: int | None = None, c: float = 0.0,
               low: float = 0.0, high: float = 1.0, fan_in: int | None = None,
               dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Create a tensor.

    ``init`` is one of ``zeros``, ``ones``, ``constant`` (value ``c``),
    ``uniform`` (on [low, high)) or ``scaled_normal`` (He normal with the
    given ``fan_in``, defaulting to the product of all but the first extent).
    Random inits require ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype)
    elif init == "ones":
        data = np.ones(shape, dtype)
    elif init == "constant":
        data = np.full(shape, c, dtype)
    elif init in ("uniform", "scaled_normal"):
        if seed is None:
            raise ValueError(f"{init} init needs a seed")
        rng = np.random.default_rng(seed)
        if init == "uniform":
            data = rng.uniform(low, high, size=shape).astype(dtype)
        else:
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else max(shape[0], 1)
            std = np.sqrt(2.0 / max(fan_in, 1))
            data = (rng.standard_normal(shape) * std).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", a.data + b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly zero is taken as 0."""
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    keep = _keepdims_shape(shape, axis)

    def bwd(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    keep = _keepdims_shape(shape, axis)
    count = int(np.prod(shape)) // max(int(np.prod(keep)), 1) if shape else 1

    def bwd(g):
        return (np.broadcast_to(np.reshape(g, keep) / count, shape).copy(),)

    return _emit("mean", np.asarray(a.data.mean(axis=axis)), (a,), bwd)


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inverse),))


def gradient_reversal(x: Tensor, scale: float) -> Tensor:
    """Identity on the forward pass; multiplies the gradient by -scale."""
    if scale < 0:
        raise ValueError("gradient reversal scale must be non-negative")
    factor = -float(scale)
    return _emit("grl", x.data, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    # floor convention: trailing rows a stride cannot reach are ignored
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n}+2*{pad}")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # -> [C*kh*kw, N*Ho*Wo]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and FCkk kernel."""
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} channels, input has {c}")
    ho = _out_extent(h, kh, stride, pad)
    wo = _out_extent(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    hp, wp = xp.shape[2:]

    def bwd(g):
        gt = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gk = (gt @ cols.T).reshape(kernel.shape)
        gb = gt.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + he : stride, j : j + we : stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad : pad + h, pad : pad + w]
            gx = np.ascontiguousarray(gx)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, bwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool, momentum: float = 0.1,
                eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over N, H, W.

    In train mode batch statistics are used and, unless ``update_stats`` is
    false, the running buffers are updated in place (unbiased variance).
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    g = gamma.data.reshape(shape)
    if not train:
        scale = g / np.sqrt(running_var.reshape(shape) + eps)
        out = (x.data - running_mean.reshape(shape)) * scale + beta.data.reshape(shape)

        def bwd_eval(up):
            xhat = (x.data - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
            return up * scale, (up * xhat).sum(axis=(0, 2, 3)), up.sum(axis=(0, 2, 3))

        return _emit("batchnorm_eval", out.astype(x.dtype), (x, gamma, beta), bwd_eval)

    m = n * h * w
    if m < 2:
        raise ValueError("train-mode batchnorm needs at least 2 values per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g + beta.data.reshape(shape)
    if update_stats:
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))

    def bwd(up):
        gbeta = up.sum(axis=(0, 2, 3))
        ggamma = (up * xhat).sum(axis=(0, 2, 3))
        dxhat = up * g
        gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return _emit("batchnorm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# softmax family


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (logits,), bwd)


def pick(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather one entry along ``axis``; ``index`` has x's shape minus that axis."""
    axis = axis % x.data.ndim
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("pick", out, (x,), bwd)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, retain: bool = False) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tracked node on ``tape``.

    Fan-out contributions are summed.  The tape is cleared afterwards unless
    ``retain`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not any(r.output == loss.node_id for r in tape.records):
        raise ValueError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.backward(g)):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    if not retain:
        tape.clear()
    return {k: Tensor(v) for k, v in grads.items()}


def grad_of(grads: dict[int, Tensor], t: Tensor) -> np.ndarray:
    """Gradient for ``t``, zeros if the loss does not depend on it."""
    g = grads.get(t.node_id)
    return np.zeros_like(t.data) if g is None else g.data


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(np.asarray(_value(f(Tensor(base.copy())))))
        flat[i] = orig - eps
        lo = float(np.asarray(_value(f(Tensor(base.copy())))))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return Tensor(out.reshape(base.shape))


def _value(v):
    return v.data if isinstance(v, Tensor) else v


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def sgd_momentum_step(param: Tensor, grad, state: OptimState, key: str) -> None:
    """Classic momentum with coupled weight decay, in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if g.shape != param.shape:
        raise ValueError(f"{key}: grad shape {g.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"{key}: non-finite gradient")
    v = state.velocity.get(key)
    if v is None:
        v = np.zeros_like(param.data)
        state.velocity[key] = v
    v *= state.momentum
    v += g
    if state.weight_decay:
        v += state.weight_decay * param.data
    param.data -= (state.learning_rate * v).astype(param.dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   eps: float = 1e-5) -> float:
    """Largest relative error between backward() and central differences.

    ``fn`` maps tensors (one per input array) to a scalar tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    grads = backward(loss, tape)
    worst = 0.0
    for i, t in enumerate(tensors):

        def partial(xi, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = xi
            return fn(*args)

        numeric = finite_diff_grad(partial, Tensor(arrays[i]), eps).data
        worst = max(worst, relative_error(grad_of(grads, t), numeric))
    return worst
