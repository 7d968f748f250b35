"""Minimal 1-D layer library with hand-written backward passes.

Tensors are numpy arrays shaped ``(batch, channels, width)``; the classifier
head works on ``(batch, features)``. Every layer caches what its backward pass
needs during ``forward`` and exposes trainable arrays in ``params`` with
matching ``grads`` after ``backward``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphNotRecorded, OddWidth, ShapeMismatch

ACTIVATIONS = ("relu", "relu6", "hardswish")


# ---------------------------------------------------------------- kernels

def affine_modality(x, scale, shift):
    """Scale/shift the ECG half and the PCG half of the last axis separately."""
    w = x.shape[-1]
    if w % 2:
        raise OddWidth(f"width {w} is odd, cannot split into ECG/PCG halves")
    h = w // 2
    out = np.empty_like(x)
    out[..., :h] = scale[0] * x[..., :h] + shift[0]
    out[..., h:] = scale[1] * x[..., h:] + shift[1]
    return out


def conv_out_width(width: int, kernel: int, stride: int, padding: int) -> int:
    return (width + 2 * padding - kernel) // stride + 1


def _im2col(x, kernel, stride, padding):
    """(N, C, W) -> (N, C, W_out, kernel) view over the zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    w_out = conv_out_width(x.shape[2], kernel, stride, padding)
    return sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :w_out]


def _depthwise(x, w, stride, padding):
    """One filter per channel; ``w`` is (C, kernel)."""
    k = w.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    wo = conv_out_width(x.shape[2], k, stride, padding)
    span = stride * (wo - 1) + 1
    out = xp[:, :, 0:span:stride] * w[None, :, 0, None]
    for j in range(1, k):
        out += xp[:, :, j : j + span : stride] * w[None, :, j, None]
    return out


def _depthwise_backward(dout, x, w, stride, padding):
    n, c, width = x.shape
    k = w.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    wo = dout.shape[2]
    span = stride * (wo - 1) + 1
    dxp = np.zeros(xp.shape, dtype=dout.dtype)
    dw = np.empty((c, k), dtype=dout.dtype)
    for j in range(k):
        dw[:, j] = np.einsum("ncw,ncw->c", dout, xp[:, :, j : j + span : stride])
        dxp[:, :, j : j + span : stride] += dout * w[None, :, j, None]
    return dxp[:, :, padding : padding + width], dw


def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 1-D cross-correlation. ``weight`` is (out, in/groups, kernel)."""
    n, c, width = x.shape
    o, cg, k = weight.shape
    if c != cg * groups or o % groups:
        raise ShapeMismatch(f"input channels {c} vs weight {weight.shape} with groups={groups}")
    if width + 2 * padding < k:
        raise ShapeMismatch(f"width {width} + 2*{padding} padding shorter than kernel {k}")
    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        out = np.matmul(weight[:, :, 0], x)
    elif cg == 1 and o == c:
        out = _depthwise(x, weight[:, 0, :], stride, padding)
    elif groups == 1:
        cols = _im2col(x, k, stride, padding)
        out = np.tensordot(cols, weight, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    else:
        cols = _im2col(x, k, stride, padding)
        wo = cols.shape[2]
        cols_g = cols.reshape(n, groups, cg, wo, k)
        w_g = weight.reshape(groups, o // groups, cg, k)
        out = np.einsum("ngcwk,gock->ngow", cols_g, w_g).reshape(n, o, wo)
    if bias is not None:
        out = out + bias[None, :, None]
    return np.ascontiguousarray(out)


def conv1d_backward(dout, x, weight, stride=1, padding=0, groups=1):
    """Gradients (dx, dweight, dbias) of :func:`conv1d`."""
    n, c, width = x.shape
    o, cg, k = weight.shape
    db = dout.sum(axis=(0, 2))
    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        dw = np.tensordot(dout, x, axes=([0, 2], [0, 2]))[:, :, None]
        return np.matmul(weight[:, :, 0].T, dout), dw, db
    if cg == 1 and o == c:
        dx, dw = _depthwise_backward(dout, x, weight[:, 0, :], stride, padding)
        return dx, dw[:, None, :], db
    cols = _im2col(x, k, stride, padding)
    wo = cols.shape[2]
    if groups == 1:
        dw = np.tensordot(dout, cols, axes=([0, 2], [0, 2]))
        dcols = np.tensordot(dout, weight, axes=([1], [0])).transpose(0, 2, 1, 3)
    else:
        cols_g = cols.reshape(n, groups, cg, wo, k)
        w_g = weight.reshape(groups, o // groups, cg, k)
        d_g = dout.reshape(n, groups, o // groups, wo)
        dw = np.einsum("ngow,ngcwk->gock", d_g, cols_g).reshape(weight.shape)
        dcols = np.einsum("ngow,gock->ngcwk", d_g, w_g).reshape(n, c, wo, k)
    dxp = np.zeros((n, c, width + 2 * padding), dtype=dout.dtype)
    span = stride * (wo - 1) + 1
    for j in range(k):
        dxp[:, :, j : j + span : stride] += dcols[:, :, :, j]
    dx = dxp[:, :, padding : padding + width] if padding else dxp
    return dx, dw, db


def batchnorm(x, gamma, beta, mean, var, eps):
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean[None, :, None]) * (gamma * inv)[None, :, None] + beta[None, :, None]


def hardswish(x):
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def activation(x, kind: str):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "relu6":
        return np.clip(x, 0, 6)
    if kind == "hardswish":
        return hardswish(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x, kind: str):
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "relu6":
        return ((x > 0) & (x < 6)).astype(x.dtype)
    if kind == "hardswish":
        g = x * x.dtype.type(1 / 3) + x.dtype.type(0.5)
        g[x < -3] = 0
        g[x > 3] = 1
        return g
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x):
    return x.mean(axis=2)


def linear(x, weight, bias=None):
    """``weight`` is (out, in); ``x`` is (batch, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"input features {x.shape[-1]} vs weight {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


def softmax(z, axis=-1):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(targets)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n


# ----------------------------------------------------------------- layers

class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def children(self) -> list[tuple[str, Layer]]:
        return []

    def reset_parameters(self, rng):
        pass

    def _cached(self):
        if self._cache is None:
            raise GraphNotRecorded(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        for _, c in self.children():
            c.astype(dtype)
        return self


def named_layers(layer: Layer, prefix: str = "") -> Iterator[tuple[str, Layer]]:
    yield prefix, layer
    for name, child in layer.children():
        yield from named_layers(child, f"{prefix}.{name}" if prefix else name)


class AffineModality(Layer):
    def __init__(self, scale=(1.0, 1.0), shift=(0.0, 0.0)):
        super().__init__()
        self.params["scale"] = np.array(scale, dtype=np.float32)
        self.params["shift"] = np.array(shift, dtype=np.float32)

    def forward(self, x, training=False):
        self._cache = x
        return affine_modality(x, self.params["scale"], self.params["shift"])

    def backward(self, dout):
        x = self._cached()
        h = x.shape[-1] // 2
        s = self.params["scale"]
        self.grads["scale"] = np.array([(dout[..., :h] * x[..., :h]).sum(), (dout[..., h:] * x[..., h:]).sum()],
                                       dtype=s.dtype)
        self.grads["shift"] = np.array([dout[..., :h].sum(), dout[..., h:].sum()], dtype=s.dtype)
        dx = np.empty_like(dout)
        dx[..., :h] = dout[..., :h] * s[0]
        dx[..., h:] = dout[..., h:] * s[1]
        return dx


class Conv1d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ShapeMismatch(f"groups={groups} must divide {in_ch} and {out_ch}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        self.params["weight"] = np.zeros((out_ch, in_ch // groups, kernel), dtype=np.float32)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=np.float32)
        # set by quantization-aware training: (weight, bias) -> fake-quantized (weight, bias)
        self.weight_fq = None

    @property
    def fan_in(self):
        return self.in_ch // self.groups * self.kernel

    def reset_parameters(self, rng):
        bound = np.sqrt(1.0 / self.fan_in)
        for k, v in self.params.items():
            self.params[k] = rng.uniform(-bound, bound, v.shape).astype(v.dtype)

    def effective_params(self):
        w, b = self.params["weight"], self.params.get("bias")
        return self.weight_fq(w, b) if self.weight_fq is not None else (w, b)

    def forward(self, x, training=False):
        w, b = self.effective_params()
        self._cache = (x, w)
        return conv1d(x, w, b, self.stride, self.padding, self.groups)

    def backward(self, dout):
        x, w = self._cached()
        dx, dw, db = conv1d_backward(dout, x, w, self.stride, self.padding, self.groups)
        self.grads["weight"] = dw
        if "bias" in self.params:
            self.grads["bias"] = db
        return dx


class BatchNorm1d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def reset_parameters(self, rng):
        self.params["gamma"][:] = 1
        self.params["beta"][:] = 0

    def forward(self, x, training=False):
        g, b = self.params["gamma"], self.params["beta"]
        if x.ndim == 2:
            return self.forward(x[:, :, None], training)[:, :, 0]
        if training:
            m = x.shape[0] * x.shape[2]
            mean = np.einsum("ncw->c", x) / m
            xc = x - mean[None, :, None]
            var = np.einsum("ncw,ncw->c", xc, xc) / m
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
            unbiased = var * m / (m - 1) if m > 1 else var
            self.buffers["running_var"] = ((1 - mom) * rv + mom * unbiased).astype(rv.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            xc = x - mean[None, :, None]
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv[None, :, None]
        self._cache = (xhat, inv, training)
        return xhat * g[None, :, None] + b[None, :, None]

    def backward(self, dout):
        squeeze = dout.ndim == 2
        if squeeze:
            dout = dout[:, :, None]
        xhat, inv, training = self._cached()
        g = self.params["gamma"]
        dgamma = np.einsum("ncw,ncw->c", dout, xhat)
        dbeta = np.einsum("ncw->c", dout)
        self.grads["gamma"], self.grads["beta"] = dgamma, dbeta
        k = (g * inv)[None, :, None]
        if training:
            m = dout.shape[0] * dout.shape[2]
            # gamma*inv * (dout - mean(dout) - xhat * mean(dout * xhat))
            dx = k * (dout - (dbeta / m)[None, :, None] - xhat * (dgamma / m)[None, :, None])
        else:
            dx = dout * k
        return dx[:, :, 0] if squeeze else dx


class Activation(Layer):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, training=False):
        self._cache = x
        return activation(x, self.kind)

    def backward(self, dout):
        return dout * activation_grad(self._cached(), self.kind)


class GlobalAvgPool(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape
        return global_avg_pool(x)

    def backward(self, dout):
        n, c, w = self._cached()
        return np.broadcast_to(dout[:, :, None] / w, (n, c, w)).copy()


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cached())


class Linear(Layer):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = np.zeros((out_features, in_features), dtype=np.float32)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=np.float32)
        self.weight_fq = None

    @property
    def fan_in(self):
        return self.in_features

    reset_parameters = Conv1d.reset_parameters
    effective_params = Conv1d.effective_params

    def forward(self, x, training=False):
        w, b = self.effective_params()
        self._cache = (x, w)
        return linear(x, w, b)

    def backward(self, dout):
        x, w = self._cached()
        self.grads["weight"] = dout.T @ x
        if "bias" in self.params:
            self.grads["bias"] = dout.sum(axis=0)
        return dout @ w


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        if isinstance(layers, dict):
            layers = list(layers.items())
        self.layers: list[tuple[str, Layer]] = [
            item if isinstance(item, tuple) else (str(i), item) for i, item in enumerate(layers)
        ]

    def children(self):
        return self.layers

    def __getitem__(self, name):
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def __len__(self):
        return len(self.layers)

    def forward(self, x, training=False):
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class Residual(Layer):
    """``body(x) + x``."""

    def __init__(self, body: Layer):
        super().__init__()
        self.body = body

    def children(self):
        return [("body", self.body)]

    def forward(self, x, training=False):
        self._cache = True
        return self.body.forward(x, training) + x

    def backward(self, dout):
        self._cached()
        return self.body.backward(dout) + dout
