"""Dense network layers with explicit forward and backward passes.

Everything is numpy, float32 by default. Each layer caches what its backward
pass needs during ``forward(..., cache=True)``; with ``cache=False`` the
forward pass leaves the layer untouched, so read-only consumers (evaluation,
attribution) can share a frozen network.

Image tensors are (B, C, H, W); point-cloud tensors are (B, N, 3).
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def bias_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv helpers (shared by the Conv2D layer and the LRP rules)

def im2col(x, kh, kw, stride, pad):
    """Unfold (B, C, H, W) into (B, C, kh, kw, Hout, Wout) patches."""
    b, c, h, w = x.shape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"kernel ({kh}x{kw}, stride {stride}, pad {pad}) larger than input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
    return cols


def col2im(cols, x_shape, stride, pad):
    """Fold patches back, accumulating overlaps. Inverse-adjoint of im2col."""
    b, c, h, w = x_shape
    kh, kw, hout, wout = cols.shape[2], cols.shape[3], cols.shape[4], cols.shape[5]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d_forward(x, weight, bias, stride, pad):
    """Plain convolution. Returns (y, cols); cols feed the backward pass."""
    cout, cin, kh, kw = weight.shape
    cols = im2col(x, kh, kw, stride, pad)
    b = x.shape[0]
    hout, wout = cols.shape[4], cols.shape[5]
    flat = cols.reshape(b, cin * kh * kw, hout * wout)
    y = np.matmul(weight.reshape(cout, -1), flat)
    if bias is not None:
        y += bias[:, None]
    return y.reshape(b, cout, hout, wout), cols


def conv2d_input_backward(dy, weight, x_shape, stride, pad):
    """Gradient (or relevance message) wrt the convolution input."""
    cout, cin, kh, kw = weight.shape
    b = dy.shape[0]
    hout, wout = dy.shape[2], dy.shape[3]
    flat = np.matmul(weight.reshape(cout, -1).T, dy.reshape(b, cout, hout * wout))
    cols = flat.reshape(b, cin, kh, kw, hout, wout)
    return col2im(cols, x_shape, stride, pad)


# ---------------------------------------------------------------------------
# layers

class Layer:
    kind = "Layer"

    def forward(self, x, training=False, cache=False):
        raise NotImplementedError

    def backward(self, dy):
        """Return dL/dx; parameter gradients land in self.grads."""
        raise NotImplementedError

    def out_shape(self, in_shape):
        """Per-sample output shape, raising ShapeError on mismatch."""
        raise NotImplementedError

    def params(self):
        return {}

    @property
    def grads(self):
        return getattr(self, "_grads", {})

    def param_count(self):
        return sum(p.size for p in self.params().values())

    def astype(self, dtype):
        """Copy of the layer with parameters cast to dtype (for numeric checks)."""
        import copy

        dup = copy.deepcopy(self)
        for name, value in dup.params().items():
            setattr(dup, name, value.astype(dtype))
        return dup

    def __repr__(self):
        return f"{self.kind}()"


class Linear(Layer):
    kind = "Linear"

    def __init__(self, in_features, out_features, rng=None, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weight = np.zeros((in_features, out_features), dtype=DTYPE)
        else:
            self.weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.bias = np.zeros(out_features, dtype=DTYPE)
        if bias and rng is not None:
            self.bias = bias_uniform(rng, (out_features,), in_features)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"Linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, training=False, cache=False):
        if cache:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, dy):
        self._grads = {"weight": self._x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ self.weight.T

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"


class SharedPointMLP(Layer):
    """Per-point dense layer: the same weights applied to every point."""

    kind = "SharedPointMLP"

    def __init__(self, in_features, out_features, rng=None, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weight = np.zeros((in_features, out_features), dtype=DTYPE)
        else:
            self.weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.bias = np.zeros(out_features, dtype=DTYPE)
        if bias and rng is not None:
            self.bias = bias_uniform(rng, (out_features,), in_features)

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise ShapeError(f"SharedPointMLP expects (N, {self.in_features}), got {in_shape}")
        return (in_shape[0], self.out_features)

    def forward(self, x, training=False, cache=False):
        if cache:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, dy):
        b, n, fin = self._x.shape
        fout = dy.shape[-1]
        self._grads = {
            "weight": self._x.reshape(-1, fin).T @ dy.reshape(-1, fout),
            "bias": dy.sum(axis=(0, 1)),
        }
        return dy @ self.weight.T

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        return f"SharedPointMLP({self.in_features}->{self.out_features})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None, bias=True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.weight = np.zeros(shape, dtype=DTYPE)
        else:
            self.weight = kaiming_uniform(rng, shape, fan_in)
        self.bias = np.zeros(out_channels, dtype=DTYPE)
        if bias and rng is not None:
            self.bias = bias_uniform(rng, (out_channels,), fan_in)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2D expects ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        hout = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wout = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if hout < 1 or wout < 1:
            raise ShapeError(f"Conv2D kernel {self.kernel_size} too large for input {in_shape}")
        return (self.out_channels, hout, wout)

    def forward(self, x, training=False, cache=False):
        y, cols = conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)
        if cache:
            self._x_shape = x.shape
            self._cols = cols
        return y

    def backward(self, dy):
        b = dy.shape[0]
        cout = self.out_channels
        flat_dy = dy.reshape(b, cout, -1)
        flat_cols = self._cols.reshape(b, -1, flat_dy.shape[2])
        dw = np.matmul(flat_dy, flat_cols.transpose(0, 2, 1)).sum(axis=0)
        self._grads = {
            "weight": dw.reshape(self.weight.shape),
            "bias": dy.sum(axis=(0, 2, 3)),
        }
        return conv2d_input_backward(dy, self.weight, self._x_shape, self.stride, self.padding)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        return (f"Conv2D({self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding})")


class BatchNorm2D(Layer):
    kind = "BatchNorm2D"

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(channels, dtype=DTYPE)
        self.beta = np.zeros(channels, dtype=DTYPE)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise ShapeError(f"BatchNorm2D expects ({self.channels}, H, W), got {in_shape}")
        return in_shape

    def forward(self, x, training=False, cache=False):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        if cache:
            self._xhat = xhat
            self._inv_std = inv_std
            self._training = training
        return self.gamma[:, None, None] * xhat + self.beta[:, None, None]

    def backward(self, dy):
        xhat, inv_std = self._xhat, self._inv_std
        self._grads = {
            "gamma": (dy * xhat).sum(axis=(0, 2, 3)),
            "beta": dy.sum(axis=(0, 2, 3)),
        }
        g = self.gamma[:, None, None] * inv_std[:, None, None]
        if not self._training:
            return dy * g
        dxhat = dy
        mean_dy = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dy_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return g * (dxhat - mean_dy - xhat * mean_dy_xhat)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def __repr__(self):
        return f"BatchNorm2D({self.channels})"


class ReLU(Layer):
    kind = "ReLU"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training=False, cache=False):
        if cache:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, kernel_size=2, stride=None):
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2D expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        hout = (h - self.kernel_size) // self.stride + 1
        wout = (w - self.kernel_size) // self.stride + 1
        if hout < 1 or wout < 1:
            raise ShapeError(f"MaxPool2D window {self.kernel_size} too large for input {in_shape}")
        return (c, hout, wout)

    def _window_view(self, x):
        b, c, h, w = x.shape
        k, s = self.kernel_size, self.stride
        cols = im2col(x.reshape(b * c, 1, h, w), k, k, s, 0)
        hout, wout = cols.shape[4], cols.shape[5]
        return cols.reshape(b, c, k * k, hout, wout), hout, wout

    def forward(self, x, training=False, cache=False):
        windows, hout, wout = self._window_view(x)
        argmax = windows.argmax(axis=2)
        if cache:
            self._x_shape = x.shape
            self._argmax = argmax
        return np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0]

    def route(self, upstream, x_shape, argmax=None):
        """Scatter per-window values back to the winning input positions."""
        if argmax is None:
            argmax = self._argmax
        b, c, h, w = x_shape
        k, s = self.kernel_size, self.stride
        hout, wout = argmax.shape[2], argmax.shape[3]
        cols = np.zeros((b, c, k * k, hout, wout), dtype=upstream.dtype)
        np.put_along_axis(cols, argmax[:, :, None], upstream[:, :, None], axis=2)
        cols = cols.reshape(b * c, 1, k, k, hout, wout)
        return col2im(cols, (b * c, 1, h, w), s, 0).reshape(b, c, h, w)

    def backward(self, dy):
        return self.route(dy, self._x_shape)

    def __repr__(self):
        return f"MaxPool2D(k={self.kernel_size}, s={self.stride})"


class GlobalMaxPool(Layer):
    """Max over the point axis: (B, N, C) -> (B, C)."""

    kind = "GlobalMaxPool"

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"GlobalMaxPool expects (N, C), got {in_shape}")
        return (in_shape[1],)

    def forward(self, x, training=False, cache=False):
        argmax = x.argmax(axis=1)
        if cache:
            self._x_shape = x.shape
            self._argmax = argmax
        return np.take_along_axis(x, argmax[:, None], axis=1)[:, 0]

    def route(self, upstream, x_shape, argmax=None):
        if argmax is None:
            argmax = self._argmax
        out = np.zeros(x_shape, dtype=upstream.dtype)
        np.put_along_axis(out, argmax[:, None], upstream[:, None], axis=1)
        return out

    def backward(self, dy):
        return self.route(dy, self._x_shape)


class Flatten(Layer):
    kind = "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, cache=False):
        if cache:
            self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._x_shape)


PARAMETRIZED_KINDS = ("Linear", "Conv2D", "SharedPointMLP")
