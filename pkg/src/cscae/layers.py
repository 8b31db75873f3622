"""Convolutional building blocks: functional kernels plus parameterised layers.

Tensors are laid out (batch, channels, height, width).  Convolution is
cross-correlation with zero padding.  ``conv_transpose2d`` is implemented
as the exact adjoint of a strided ``conv2d`` sharing the same kernel, so a
fractional stride ``1/u`` upsamples by the integer factor ``u``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, get_default_dtype, make_node, matmul, sigmoid, leaky_relu

# -- im2col machinery -------------------------------------------------------


def _pad(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _channels_first(x: np.ndarray) -> np.ndarray:
    """(b, c, h, w) -> contiguous (c, b, h, w) working layout."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _batch_first(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded (c, b, hp, wp) input as a (c*kh*kw, b*ho*wo) matrix."""
    c, b = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(c, b * ho * wo)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, p, q] = xp[:, :, p : p + (ho - 1) * stride + 1 : stride, q : q + (wo - 1) * stride + 1 : stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col` into a zero (c, b, hp, wp) array.

    The accumulation order (kernel offsets in row-major order) is fixed, so
    the result does not depend on any runtime scheduling.
    """
    c, b, hp, wp = shape
    if kh == kw == 1 and stride == 1:
        return cols.reshape(shape)
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p : p + (ho - 1) * stride + 1 : stride, q : q + (wo - 1) * stride + 1 : stride] += cols[:, p, q]
    return out


def same_padding(k: int, stride: int = 1) -> tuple[int, int]:
    """Half-window zero padding; keeps size/stride output for divisible inputs."""
    total = k - 1
    return total // 2, total - total // 2


def _split_padding(padding, kh: int, kw: int, stride: int) -> tuple[int, int, int, int]:
    if padding == "same":
        return same_padding(kh, stride) + same_padding(kw, stride)
    if isinstance(padding, int):
        return padding, padding, padding, padding
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    return tuple(padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same", name: str = "conv2d") -> Tensor:
    """2-D cross-correlation. ``weight`` is (out_ch, in_ch, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (b, c, h, w) input, got {x.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"{name}: input has {c} channels, kernel expects {ci}")
    if padding == "same" and (h % stride or w % stride):
        raise ShapeError(f"{name}: spatial size {h}x{w} not divisible by stride {stride}")
    pt, pb, pl, pr = _split_padding(padding, kh, kw, stride)
    ho = (h + pt + pb - kh) // stride + 1
    wo = (w + pl + pr - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{name}: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = _pad(_channels_first(x.data), pt, pb, pl, pr)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _batch_first(out.reshape(o, b, ho, wo))

    def bw(g):
        g2 = _channels_first(g).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ g2, xp.shape, kh, kw, stride, ho, wo)
            gx = _batch_first(gxp[:, :, pt : pt + h, pl : pl + w])
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(name, out, inputs, bw)


def transposed_padding(k: int, upsample: int) -> tuple[int, int]:
    """Crop that makes a transposed conv output exactly ``upsample`` x input."""
    total = k - upsample
    if total < 0:
        raise ShapeError(f"kernel size {k} smaller than upsample factor {upsample}")
    return total // 2, total - total // 2


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, upsample: int = 1, name: str = "conv_transpose2d") -> Tensor:
    """Fractionally strided convolution; ``weight`` is (in_ch, out_ch, kh, kw).

    Equals the adjoint of ``conv2d(., weight, stride=upsample)`` with padding
    from :func:`transposed_padding`, so output spatial size is exactly
    ``upsample * input``.
    """
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (b, c, h, w) input, got {x.shape}")
    b, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"{name}: input has {c} channels, kernel expects {ci}")
    pt, pb = transposed_padding(kh, upsample)
    pl, pr = transposed_padding(kw, upsample)
    ho, wo = h * upsample, w * upsample
    full = (o, b, ho + pt + pb, wo + pl + pr)
    x2 = _channels_first(x.data).reshape(c, -1)
    wmat = weight.data.reshape(ci, -1)
    outp = _col2im(wmat.T @ x2, full, kh, kw, upsample, h, w)
    out = outp[:, :, pt : pt + ho, pl : pl + wo]
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1, 1)
    out = _batch_first(out)

    def bw(g):
        gp = _pad(_channels_first(g), pt, pb, pl, pr)
        gcols = _im2col(gp, kh, kw, upsample, h, w)
        gx = _batch_first((wmat @ gcols).reshape(c, b, h, w)) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(name, out, inputs, bw)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None, name: str = "avg_pool2d") -> Tensor:
    stride = k if stride is None else stride
    if stride != k:
        raise ShapeError(f"{name}: only non-overlapping pooling (stride == window) is supported")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"{name}: spatial size {h}x{w} not divisible by window {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = x.dtype.type(1.0 / (k * k))

    def bw(g):
        g = np.repeat(np.repeat(g * scale, k, axis=2), k, axis=3)
        return (g,)

    return make_node(name, out, (x,), bw)


def global_avg_pool(x: Tensor, name: str = "global_avg_pool") -> Tensor:
    """(b, c, h, w) -> (b, c)."""
    b, c, h, w = x.shape
    scale = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3))
    return make_node(name, out, (x,), lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    name: str = "batch_norm",
) -> Tensor:
    """Per-channel batch normalisation over (batch, height, width).

    In training mode the running statistics are updated in place, with the
    unbiased batch variance feeding ``running_var``.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"{name}: input {x.shape} does not match {gamma.shape[0]} channels")
    xd = x.data
    axes = (0, 2, 3)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    shape = (1, -1, 1, 1)
    if training:
        if n < 2 or xd.shape[0] < 2:
            raise ShapeError(f"{name}: training mode needs batch size >= 2, got {xd.shape[0]}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(shape).astype(xd.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.mean(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - s1 - xhat * s2) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, gg, gbeta

    return make_node(name, out, (x, gamma, beta), bw)


# -- modules ----------------------------------------------------------------


class Module:
    """Minimal container tracking named parameters, buffers and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, m in self._children.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self._buffers:
            yield prefix + k, getattr(self, k)
        for k, m in self._children.items():
            yield from m.named_buffers(prefix + k + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._children.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        owners = {}
        for m_prefix, m in self._named_modules():
            for k in m._buffers:
                owners[m_prefix + k] = (m, k)
        expected = set(params) | set(owners)
        if strict:
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, v in state.items():
            if k in params:
                target = params[k]
                if tuple(v.shape) != target.shape:
                    raise ShapeError(f"{k}: stored shape {tuple(v.shape)} != model shape {target.shape}")
                target.data = np.array(v, dtype=target.dtype)
            elif k in owners:
                m, name = owners[k]
                cur = getattr(m, name)
                if tuple(v.shape) != cur.shape:
                    raise ShapeError(f"{k}: stored shape {tuple(v.shape)} != model shape {cur.shape}")
                m.register_buffer(name, np.array(v, dtype=cur.dtype))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for k, m in self._children.items():
            yield from m._named_modules(prefix + k + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    # U(-a, a) has std a/sqrt(3); pick a so the std is 1/sqrt(fan_in)
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, rng: np.random.Generator | None = None, name: str = "conv2d"):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.name = name
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k), dtype=get_default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=get_default_dtype()), requires_grad=True)
        init_parameters(self, rng)

    @property
    def fan_in(self) -> float:
        return self.in_ch * self.k * self.k

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, "same", name=self.name)

    def output_shape(self, shape):
        b, _, h, w = shape
        return (b, self.out_ch, h // self.stride, w // self.stride)


class ConvTranspose2d(Module):
    """Deconvolution realising stride ``1/upsample``; kernel is (in_ch, out_ch, k, k)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, upsample: int = 1, rng: np.random.Generator | None = None, name: str = "deconv2d"):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.upsample = in_ch, out_ch, k, upsample
        self.name = name
        transposed_padding(k, upsample)
        self.weight = Tensor(np.zeros((in_ch, out_ch, k, k), dtype=get_default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=get_default_dtype()), requires_grad=True)
        init_parameters(self, rng)

    @property
    def fan_in(self) -> float:
        # inputs contributing to one output pixel
        return self.in_ch * self.k * self.k / (self.upsample * self.upsample)

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.upsample, name=self.name)

    def output_shape(self, shape):
        b, _, h, w = shape
        return (b, self.out_ch, h * self.upsample, w * self.upsample)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None, name: str = "linear"):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.name = name
        self.weight = Tensor(np.zeros((in_features, out_features), dtype=get_default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=get_default_dtype()), requires_grad=True)
        init_parameters(self, rng)

    @property
    def fan_in(self) -> float:
        return self.in_features

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight, name=self.name) + self.bias


class AvgPool2d(Module):
    def __init__(self, k: int, name: str = "avg_pool2d"):
        super().__init__()
        self.k = k
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return avg_pool2d(x, self.k, name=self.name)

    def output_shape(self, shape):
        b, c, h, w = shape
        return (b, c, h // self.k, w // self.k)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "batch_norm"):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.name = name
        dt = get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps, name=self.name
        )


class LeakyReLU(Module):
    def __init__(self, negative_slope: float = 0.01):
        super().__init__()
        self.negative_slope = negative_slope

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(x, self.negative_slope)


class Sigmoid(Module):
    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


def init_parameters(layer: Module, seed: int | np.random.Generator | None = None) -> dict[str, Tensor]:
    """Zero-mean uniform kernels with std ``1/sqrt(fan_in)``; zero biases.

    Deterministic for a given integer seed or generator state.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layer.weight.data = _uniform(rng, layer.weight.shape, layer.fan_in)
    layer.bias.data = np.zeros(layer.bias.shape, dtype=get_default_dtype())
    return {"weight": layer.weight, "bias": layer.bias}
