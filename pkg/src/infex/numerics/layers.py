"""Differentiable layers over float32 numpy arrays.

Activations are batch-first: images are ``(N, C, H, W)``, vectors ``(N, D)``.
Each layer caches what it needs during ``forward`` and consumes that cache in
``backward``; a layer therefore supports one pending backward at a time.
Callers that need two branches through one network stack them into a single
batch.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, InputValidationError

DTYPE = np.float32


class Param:
    """A trainable array plus its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)

    @property
    def shape(self):
        return self.value.shape


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


class Layer:
    def params(self) -> list[tuple[str, Param]]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x, kh, kw, stride):
    """Patches as ``(N, C*kh*kw, OH*OW)``, built from one strided slice per kernel tap."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, p, q] = x[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(dcols, shape, kh, kw, stride, oh, ow):
    """Scatter-add ``(N, C*kh*kw, OH*OW)`` patch gradients back to an ``(N, C, H, W)`` image."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
    for p in range(kh):
        for q in range(kw):
            dx[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += dcols[:, :, p, q]
    return dx


class Conv2d(Layer):
    """Valid (unpadded) strided convolution. Weight layout ``(F, C, kh, kw)``.

    With ``input_grad=False`` the backward pass fills the parameter gradients
    only and returns ``None``; used for layers that read raw frames.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, rng=None, input_grad=True):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.stride = int(stride)
        self.input_grad = input_grad
        fan_in = in_channels * kh * kw
        shape = (out_channels, in_channels, kh, kw)
        w = he_normal(rng, shape, fan_in) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_channels, DTYPE))
        self._cache = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_shape(self, c, h, w):
        f, cin, kh, kw = self.weight.shape
        if c != cin or h < kh or w < kw:
            raise ConfigurationError(
                f"conv2d: input (C={c}, H={h}, W={w}) incompatible with kernel {self.weight.shape}"
            )
        return f, conv_output_size(h, kh, self.stride), conv_output_size(w, kw, self.stride)

    def forward(self, x):
        n, c, h, w = x.shape
        f, _, kh, kw = self.weight.shape
        self.output_shape(c, h, w)
        cols, oh, ow = _im2col(x, kh, kw, self.stride)
        out = np.matmul(self.weight.value.reshape(f, -1), cols)
        out += self.bias.value[:, None]
        self._cache = (cols, x.shape, oh, ow)
        return out.reshape(n, f, oh, ow)

    def backward(self, dout):
        cols, shape, oh, ow = self._cache
        f, c, kh, kw = self.weight.shape
        d3 = dout.reshape(shape[0], f, oh * ow)
        self.weight.grad += np.matmul(d3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        self.bias.grad += d3.sum(axis=(0, 2))
        if not self.input_grad:
            return None
        dcols = np.matmul(self.weight.value.reshape(f, -1).T, d3)
        return _col2im(dcols, shape, kh, kw, self.stride, oh, ow)


class ConvTranspose2d(Layer):
    """Transposed convolution; with the same weight it is the adjoint of :class:`Conv2d`.

    Weight layout ``(C_in, C_out, kh, kw)``; output size ``(H - 1) * stride + kh``.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, rng=None):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.stride = int(stride)
        # each output pixel sees roughly in_channels * (k/stride)^2 inputs
        fan_in = max(1, in_channels * (kh // self.stride) * (kw // self.stride))
        shape = (in_channels, out_channels, kh, kw)
        w = he_normal(rng, shape, fan_in) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_channels, DTYPE))
        self._cache = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_shape(self, c, h, w):
        cin, cout, kh, kw = self.weight.shape
        if c != cin:
            raise ConfigurationError(
                f"deconv2d: input channels {c} do not match weight {self.weight.shape}"
            )
        return cout, (h - 1) * self.stride + kh, (w - 1) * self.stride + kw

    def forward(self, x):
        n, c, h, w = x.shape
        cin, cout, kh, kw = self.weight.shape
        _, oh, ow = self.output_shape(c, h, w)
        x3 = x.reshape(n, cin, h * w)
        cols = np.matmul(self.weight.value.reshape(cin, -1).T, x3)
        out = _col2im(cols, (n, cout, oh, ow), kh, kw, self.stride, h, w)
        out += self.bias.value[None, :, None, None]
        self._cache = x3
        return out

    def backward(self, dout):
        x3 = self._cache
        cin, cout, kh, kw = self.weight.shape
        n = dout.shape[0]
        cols, h, w = _im2col(dout, kh, kw, self.stride)
        self.weight.grad += np.matmul(x3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        dx = np.matmul(self.weight.value.reshape(cin, -1), cols)
        return dx.reshape(n, cin, h, w)


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, in_features, out_features, rng=None, bias=True):
        w = he_normal(rng, (out_features, in_features), in_features) if rng is not None \
            else np.zeros((out_features, in_features), DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_features, DTYPE)) if bias else None
        self._x = None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ConfigurationError(
                f"dense: input shape {x.shape} incompatible with weight {self.weight.shape}"
            )
        self._x = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y += self.bias.value
        return y

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        if self.bias is not None:
            self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class ReLU(Layer):
    def forward(self, x):
        self._out = np.maximum(x, x.dtype.type(0))
        return self._out

    def backward(self, dout):
        return np.where(self._out > 0, dout, dout.dtype.type(0))


class Sigmoid(Layer):
    """Logistic function; outputs are kept strictly inside (0, 1) at the input's precision."""

    def forward(self, x):
        info = np.finfo(x.dtype if np.issubdtype(x.dtype, np.floating) else DTYPE)
        y = 1.0 / (1.0 + np.exp(-np.clip(x, -80.0, 80.0)))
        self._y = np.clip(y, info.tiny, 1.0 - info.epsneg).astype(info.dtype, copy=False)
        return self._y

    def backward(self, dout):
        return dout * self._y * (1.0 - self._y)


class MaxPool2(Layer):
    """Non-overlapping 2x2 max pooling. Ties route to the first max in row-major order."""

    QUADS = ((0, 0), (0, 1), (1, 0), (1, 1))  # row-major order inside each window

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        a, b, d, e = (x[:, :, i::2, j::2] for i, j in self.QUADS)
        out = np.maximum(np.maximum(a, b), np.maximum(d, e))
        self._cache = (x, out)
        return out

    def backward(self, dout):
        x, out = self._cache
        dx = np.zeros(x.shape, dtype=dout.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in self.QUADS:
            hit = (x[:, :, i::2, j::2] == out) & ~taken
            dx[:, :, i::2, j::2] = np.where(hit, dout, dout.dtype.type(0))
            taken |= hit
        return dx


class Reshape(Layer):
    """Reshape the non-batch dims; ``Reshape(-1)`` flattens."""

    def __init__(self, *shape):
        self.shape = shape

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._in)


def Flatten():
    return Reshape(-1)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{name}", p) for name, p in layer.params())
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class MultiplicativeFusion(Layer):
    """Joint feature ``(W_s h) * (W_a a)`` of a state feature and a one-hot action."""

    def __init__(self, state_dim, action_dim, joint_dim, rng=None):
        self.state_proj = Dense(state_dim, joint_dim, rng=rng, bias=False)
        self.action_proj = Dense(action_dim, joint_dim, rng=rng, bias=False)
        if rng is not None:
            # one-hot inputs have fan-in 1; keep the action factor near unit scale
            self.action_proj.weight.value[...] = rng.normal(
                1.0, 0.1, size=self.action_proj.weight.shape).astype(DTYPE)

    def params(self):
        return [("state." + n, p) for n, p in self.state_proj.params()] + \
               [("action." + n, p) for n, p in self.action_proj.params()]

    def forward(self, h_s, a_onehot):
        check_one_hot(a_onehot)
        self._u = self.state_proj.forward(h_s)
        self._v = self.action_proj.forward(a_onehot)
        return self._u * self._v

    def backward(self, dout):
        """Returns the gradient w.r.t. the state feature; the action input is not differentiable."""
        self.action_proj.backward(dout * self._u)
        return self.state_proj.backward(dout * self._v)

    def __call__(self, h_s, a_onehot):
        return self.forward(h_s, a_onehot)


def check_one_hot(a):
    a = np.asarray(a)
    ok = a.ndim == 2 and np.all((a == 0) | (a == 1)) and np.all(a.sum(axis=1) == 1)
    if not ok:
        raise InputValidationError("action input must be a batch of one-hot rows")


def one_hot(actions, n_actions):
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise InputValidationError(f"action index out of range [0, {n_actions})")
    out = np.zeros((actions.size, n_actions), dtype=DTYPE)
    out[np.arange(actions.size), actions] = 1.0
    return out


def relu(x):
    return ReLU().forward(np.asarray(x, dtype=DTYPE))


def sigmoid(x):
    return Sigmoid().forward(np.asarray(x, dtype=DTYPE))


def maxpool2(x):
    """2x2 max pool of a single ``(H, W)`` image, a ``(C, H, W)`` stack or a batch."""
    x = np.asarray(x, dtype=DTYPE)
    lead = 4 - x.ndim
    y = MaxPool2().forward(x.reshape((1,) * lead + x.shape))
    return y.reshape(y.shape[lead:])
