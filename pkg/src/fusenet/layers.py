"""Layer vocabulary with explicit forward / backward passes.

Every layer caches what it needs during ``forward`` and consumes it in
``backward(dout) -> dx``; parameter gradients are *accumulated* into
``Parameter.grad`` so callers zero them between steps.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, DimensionError, Parameter


class Layer:
    name = "layer"

    def params(self) -> List[Parameter]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        """Shape propagation on a (C, H, W) or (F,) sample shape."""
        return shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2D(Layer):
    """3x3 (or k x k) stride-1 same-padded cross-correlation."""

    def __init__(self, in_ch, out_ch, kernel=3, bias=True, rng=None, dtype=np.float64, name="conv"):
        if kernel % 2 != 1:
            raise ConfigurationError("same padding needs an odd kernel size")
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.weight = Parameter(f"{name}.weight",
                                _kaiming(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
                                decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise DimensionError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        return (self.out_ch, h, w)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"{self.name}: expected N x {self.in_ch} x H x W input, got {x.shape}")
        n, c, h, w = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (N, C, H, W, k, k) -> (N, H, W, C, k, k) -> rows of C*k*k
        cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(n * h * w, c * k * k)
        wmat = self.weight.value.reshape(self.out_ch, -1)
        out = cols @ wmat.T
        if self.bias is not None:
            out += self.bias.value
        self._cache = (x.shape, cols)
        return out.reshape(n, h, w, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (n, c, h, w), cols = self._cache
        k, p = self.kernel, self.kernel // 2
        dmat = dout.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_ch)
        self.weight.grad += (dmat.T @ cols).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += dmat.sum(axis=0)
        dcols = (dmat @ self.weight.value.reshape(self.out_ch, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties route to the first row-major maximum."""

    def __init__(self, window=2, name="pool"):
        self.window = (window, window) if np.isscalar(window) else tuple(window)
        self.name = name

    def output_shape(self, shape):
        c, h, w = shape
        ph, pw = self.window
        if h % ph or w % pw:
            raise DimensionError(f"{self.name}: extent {h}x{w} not divisible by window {ph}x{pw}")
        return (c, h // ph, w // pw)

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        self.output_shape((c, h, w))
        ph, pw = self.window
        win = x.reshape(n, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // ph, w // pw, ph * pw)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        (n, c, h, w), idx = self._cache
        ph, pw = self.window
        dwin = np.zeros((n, c, h // ph, w // pw, ph * pw), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, c, h // ph, w // pw, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    def __init__(self, name="gap"):
        self.name = name

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._shape).copy()


class Dense(Layer):
    """Fully-connected layer ``x_flat @ W + b`` with W of shape (in, out)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64, name="fc"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(f"{name}.weight",
                                _kaiming(rng, (in_features, out_features), in_features, dtype), decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.in_features:
            raise DimensionError(f"{self.name}: flattened extent {int(np.prod(shape))} != {self.in_features}")
        return (self.out_features,)

    def forward(self, x, training=False):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise DimensionError(f"{self.name}: flattened extent {flat.shape[1]} != {self.in_features}")
        self._cache = (x.shape, flat)
        return flat @ self.weight.value + self.bias.value

    def backward(self, dout):
        shape, flat = self._cache
        self.weight.grad += flat.T @ dout
        self.bias.grad += dout.sum(axis=0)
        return (dout @ self.weight.value.T).reshape(shape)


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W) or (N,) axes."""

    def __init__(self, channels, decay=0.99, epsilon=1e-5, dtype=np.float64, name="bn"):
        if not 0 < decay < 1:
            raise ConfigurationError(f"{name}: moving-average decay must lie in (0, 1)")
        self.name = name
        self.decay, self.epsilon = decay, epsilon
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_var = np.ones(channels, dtype=dtype)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.moving_mean": self.moving_mean, f"{self.name}.moving_var": self.moving_var}

    @staticmethod
    def _axes(x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bcast(self, v, x):
        return v[None, :, None, None] if x.ndim == 4 else v[None, :]

    def forward(self, x, training=False):
        axes = self._axes(x)
        if training:
            if x.shape[0] < 2:
                raise ConfigurationError(f"{self.name}: training-mode batch norm needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            d = self.decay
            self.moving_mean[...] = d * self.moving_mean + (1 - d) * mean
            self.moving_var[...] = d * self.moving_var + (1 - d) * var
        else:
            mean, var = self.moving_mean, self.moving_var
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        self._cache = (xhat, inv, training, axes)
        return xhat * self._bcast(self.gamma.value, x) + self._bcast(self.beta.value, x)

    def backward(self, dout):
        xhat, inv, training, axes = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=axes)
        self.beta.grad += dout.sum(axis=axes)
        dxhat = dout * self._bcast(self.gamma.value, dout)
        if not training:
            return dxhat * self._bcast(inv, dout)
        m = dout.size // dout.shape[1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return self._bcast(inv, dout) / m * (m * dxhat - self._bcast(s1, dout) - xhat * self._bcast(s2, dout))


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.maximum(x, 0, dtype=x.dtype)

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/keep_prob at train time."""

    def __init__(self, keep_prob=0.5, seed=0, name="dropout"):
        if not 0 < keep_prob <= 1:
            raise ConfigurationError(f"{name}: keep_prob must lie in (0, 1]")
        self.name = name
        self.keep_prob = keep_prob
        self.rng = np.random.default_rng(seed)
        self.fixed_mask: Optional[np.ndarray] = None

    def forward(self, x, training=False):
        if not training or self.keep_prob == 1.0:
            self._mask = None
            return x
        if self.fixed_mask is not None:
            mask = self.fixed_mask
        else:
            mask = self.rng.random(x.shape) < self.keep_prob
        self._mask = mask
        return x * mask / self.keep_prob

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask / self.keep_prob


class Sequential(Layer):
    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and row-softmax probabilities (max-subtracted)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    probs = np.exp(z - logsum[:, None])
    return loss, probs


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n


# functional wrappers --------------------------------------------------------

def conv2d_forward(x, layer: Conv2D):
    return layer.forward(x)


def maxpool_forward(x, window):
    pool = MaxPool2D(window)
    out = pool.forward(x)
    return out, pool._cache[1]


def fc_forward(x, layer: Dense):
    return layer.forward(x)


def batchnorm_forward(x, layer: BatchNorm, training=False):
    return layer.forward(x, training)


def relu(x):
    return np.maximum(x, 0)


def dropout_forward(x, layer: Dropout, training=False):
    out = layer.forward(x, training)
    mask = layer._mask if layer._mask is not None else np.ones(x.shape, dtype=bool)
    return out, mask
