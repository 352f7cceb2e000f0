"""Small reverse-mode autodiff engine over numpy arrays.

Every op records its inputs and a backward closure on the output tensor.
``backward`` rebuilds the executed subgraph as a :class:`Tape` ordered by
creation sequence and walks it in strict reverse order.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_sequence = itertools.count()


class DimensionError(ValueError):
    """Operand shapes or conv geometry are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "",
                 dtype=np.float64):
        self.values = np.array(values, dtype=dtype, copy=True) if not isinstance(values, np.ndarray) \
            else values.astype(dtype, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._seq = next(_sequence)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor(values, dtype=values.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Executed ops reachable from a root, in creation order."""

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def reversed(self) -> Iterable[Tensor]:
        return reversed(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients are added to whatever is already stored, so two calls without
    zeroing double the result.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    # intermediate grads live only for this pass; leaves keep accumulating
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in tape.reversed():
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, upstream)


def _send(upstream: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._backward is None:
        t.accumulate(g)
        return
    prev = upstream.get(id(t))
    upstream[id(t)] = g if prev is None else prev + g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, up):
        _send(up, a, _unbroadcast(g, a.shape))
        _send(up, b, _unbroadcast(g, b.shape))

    return _make(a.values + b.values, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, up):
        _send(up, a, _unbroadcast(g, a.shape))
        _send(up, b, -_unbroadcast(g, b.shape))

    return _make(a.values - b.values, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, up):
        _send(up, a, _unbroadcast(g * b.values, a.shape))
        _send(up, b, _unbroadcast(g * a.values, b.shape))

    return _make(a.values * b.values, (a, b), bw, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g, up):
        _send(up, a, g * exponent * a.values ** (exponent - 1))

    return _make(a.values ** exponent, (a,), bw, "pow")


def log(a: Tensor) -> Tensor:
    def bw(g, up):
        _send(up, a, g / a.values)

    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports the non-finite result
        out = np.log(a.values)
    return _make(out, (a,), bw, "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.values >= lo) & (a.values <= hi)

    def bw(g, up):
        _send(up, a, g * inside)

    return _make(np.clip(a.values, lo, hi), (a,), bw, "clamp")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # x == 0 takes the negative branch
    positive = x.values > 0
    scale = np.where(positive, 1.0, slope)

    def bw(g, up):
        _send(up, x, g * scale)

    return _make(x.values * scale, (x,), bw, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.values)

    def bw(g, up):
        _send(up, x, g * s * (1.0 - s))

    return _make(s, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)

    def bw(g, up):
        _send(up, x, g * (1.0 - t * t))

    return _make(t, (x,), bw, "tanh")


def log_sigmoid(x: Tensor, eps: float = 0.0) -> Tensor:
    """log(sigmoid(x)), computed stably from the logit.

    With ``eps`` > 0 this is log(clamp(sigmoid(x), eps, 1 - eps)): the value is
    clipped to [log eps, log(1 - eps)] and the gradient is zero where clipping
    is active.
    """
    raw = -np.logaddexp(0.0, -x.values)
    s = stable_sigmoid(-x.values)
    out = raw
    if eps > 0:
        lo, hi = np.log(eps), np.log1p(-eps)
        out = np.clip(raw, lo, hi)
        s = s * ((raw > lo) & (raw < hi))

    def bw(g, up):
        _send(up, x, g * s)

    return _make(out, (x,), bw, "log_sigmoid")


def grl(x: Tensor, coefficient: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, multiplies the gradient by -coefficient."""
    if coefficient < 0:
        raise ValueError("reversal coefficient must be nonnegative")

    def bw(g, up):
        _send(up, x, -coefficient * g)

    return _make(x.values.copy(), (x,), bw, "grl")


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None) -> Tensor:
    def bw(g, up):
        if axis is None:
            _send(up, a, np.broadcast_to(g, a.shape).copy())
        else:
            _send(up, a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(np.asarray(a.values.sum(axis=axis)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g, up):
        _send(up, a, g.reshape(a.shape))

    return _make(a.values.reshape(shape), (a,), bw, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, index) -> Tensor:
    def bw(g, up):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        _send(up, a, full)

    return _make(np.array(a.values[index]), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, up):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _send(up, t, g[tuple(sl)])

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")

    def bw(g, up):
        _send(up, a, g @ b.values.T)
        _send(up, b, a.values.T @ g)

    return _make(a.values @ b.values, (a, b), bw, "matmul")


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def deconv_output_extent(extent: int, k: int, stride: int, padding: int,
                         output_padding: int = 0) -> int:
    return (extent - 1) * stride - 2 * padding + k + output_padding


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, ho, wo, k, k) strided view into the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_patches(cols: np.ndarray, padded_hw: tuple[int, int], stride: int) -> np.ndarray:
    n, c, ho, wo, k, _ = cols.shape
    out = np.zeros((n, c) + padded_hw, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[2]
    ho = conv_output_extent(x.shape[2], k, stride, padding)
    wo = conv_output_extent(x.shape[3], k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _patches(xp, k, stride, ho, wo)
    return np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, out_hw: tuple[int, int], stride: int,
                     padding: int) -> np.ndarray:
    """Adjoint of ``_conv_forward`` w.r.t. its input; also the deconv forward map."""
    cols = np.einsum("nohw,ocij->nchwij", g, w, optimize=True)
    h, wd = out_hw
    canvas = _scatter_patches(cols, (h + 2 * padding, wd + 2 * padding), stride)
    return canvas[:, :, padding : padding + h, padding : padding + wd]


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _patches(xp, k, stride, ho, wo)
    return np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)


def _check_geometry(x: Tensor, kernel: Tensor, stride: int, padding: int, channel_axis: int) -> int:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv ops expect 4-D input and kernel")
    k = kernel.shape[2]
    if kernel.shape[3] != k:
        raise DimensionError("only square kernels are supported")
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError("need k >= 1, stride >= 1, padding >= 0")
    if x.shape[1] != kernel.shape[channel_axis]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[channel_axis]}")
    return k


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [Cout,C,k,k]."""
    k = _check_geometry(x, kernel, stride, padding, channel_axis=1)
    h, w = x.shape[2], x.shape[3]
    ho, wo = conv_output_extent(h, k, stride, padding), conv_output_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv output extent ({ho}, {wo}) < 1 for input {x.shape}")

    def bw(g, up):
        if x.requires_grad:
            _send(up, x, _conv_input_grad(g, kernel.values, (h, w), stride, padding))
        if kernel.requires_grad:
            _send(up, kernel, _conv_kernel_grad(x.values, g, k, stride, padding))

    return _make(_conv_forward(x.values, kernel.values, stride, padding), (x, kernel), bw, "conv2d")


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
             output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is [Cin,Cout,k,k] like the conv it inverts."""
    k = _check_geometry(x, kernel, stride, padding, channel_axis=0)
    if not 0 <= output_padding < stride:
        raise DimensionError("output_padding must lie in [0, stride)")
    h, w = x.shape[2], x.shape[3]
    ho = deconv_output_extent(h, k, stride, padding, output_padding)
    wo = deconv_output_extent(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv output extent ({ho}, {wo}) < 1 for input {x.shape}")

    def bw(g, up):
        if x.requires_grad:
            _send(up, x, _conv_forward(g, kernel.values, stride, padding))
        if kernel.requires_grad:
            _send(up, kernel, _conv_kernel_grad(g, x.values, k, stride, padding))

    out = _conv_input_grad(x.values, kernel.values, (ho, wo), stride, padding)
    return _make(np.ascontiguousarray(out), (x, kernel), bw, "deconv2d")


# ---------------------------------------------------------------- normalization / noise

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over axis 1 of a 2-D or 4-D input.

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased batch variance, exponential average with ``momentum``).
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.values.reshape(bshape) * xhat + beta.values.reshape(bshape)

    def bw(g, up):
        _send(up, gamma, (g * xhat).sum(axis=axes))
        _send(up, beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.values.reshape(bshape)
        if training:
            gx = (gx - gx.mean(axis=axes, keepdims=True)
                  - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
        _send(up, x, gx * inv_std.reshape(bshape))

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs the run's rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g, up):
        _send(up, x, g * mask)

    return _make(x.values * mask, (x,), bw, "dropout")


# ---------------------------------------------------------------- losses

def mse_per_sample(recon: Tensor, target: Tensor) -> Tensor:
    """Mean over features of the squared error, one value per sample."""
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction {recon.shape} vs input {target.shape}")
    diff = recon.values - target.values
    n = diff.shape[0]
    m = diff[0].size

    def bw(g, up):
        scale = (2.0 / m) * g.reshape((n,) + (1,) * (diff.ndim - 1))
        _send(up, recon, scale * diff)
        _send(up, target, -scale * diff)

    with np.errstate(over="ignore", invalid="ignore"):
        out = (diff.reshape(n, -1) ** 2).mean(axis=1)
    return _make(out, (recon, target), bw, "mse_per_sample")
