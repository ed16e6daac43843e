"""Differentiable layers: convolution, batch norm, pooling, dense, activations.

Layers are small frozen descriptions.  Parameters live outside them in a
flat ``{name: Tensor}`` mapping (trainable) and a ``{name: ndarray}``
mapping (batch-norm running statistics), keyed by ``"<layer>.<field>"``.
Layout is [batch, channel, height, width] throughout.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size, relu, softmax
from .errors import ContractError

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "batch_norm",
    "conv2d",
    "conv_output_size",
    "fully_connected",
    "global_avg_pool",
    "he_normal",
    "relu",
    "softmax",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    return ad.conv2d(x, weight, bias, stride=stride, padding=padding)


def fully_connected(x, weight, bias=None):
    """x: [n, in]; weight: [out, in]; bias: [out]."""
    x = ad.as_tensor(x)
    weight = ad.as_tensor(weight)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    out = ad.matmul(x, ad.transpose(weight))
    return out if bias is None else out + bias


def global_avg_pool(x):
    """[n, c, h, w] -> [n, c]."""
    if x.ndim != 4:
        raise ContractError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return ad.mean(x, axis=(2, 3))


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalisation followed by an affine map.

    Works on [n, c] and [n, c, h, w].  Returns ``(out, mean, var)`` where the
    last two are the running statistics to keep: updated in training mode,
    passed through unchanged otherwise.
    """
    x = ad.as_tensor(x)
    gamma, beta = ad.as_tensor(gamma), ad.as_tensor(beta)
    if x.ndim < 2:
        raise ContractError(f"batch_norm expects at least 2-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"batch_norm: affine params must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise ContractError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        new_mean = momentum * running_mean + (1 - momentum) * mu.reshape(c)
        new_var = momentum * running_var + (1 - momentum) * var.reshape(c)
    else:
        mu = np.asarray(running_mean).reshape(bshape)
        var = np.asarray(running_var).reshape(bshape)
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_b = gamma.data.reshape(bshape)
    out = xhat * g_b + beta.data.reshape(bshape)
    m = x.size // c

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_b
        if training:
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return Tensor._wrap(out, "batch_norm", (x, gamma, beta), vjp), new_mean, new_var


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def param_shapes(self):
        k = self.kernel_size
        shapes = {f"{self.name}.weight": (self.out_channels, self.in_channels, k, k)}
        if self.bias:
            shapes[f"{self.name}.bias"] = (self.out_channels,)
        return shapes

    def buffer_shapes(self):
        return {}

    def init_buffers(self):
        return {}

    def init(self, rng):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        params = {f"{self.name}.weight": he_normal(rng, (self.out_channels, self.in_channels, k, k), fan_in)}
        if self.bias:
            params[f"{self.name}.bias"] = np.zeros(self.out_channels)
        return params

    def output_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)

    def __call__(self, x, params, buffers=None, training=False):
        return conv2d(x, params[f"{self.name}.weight"], params.get(f"{self.name}.bias"),
                      stride=self.stride, padding=self.padding)


@dataclass(frozen=True)
class BatchNorm2d:
    name: str
    channels: int

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def buffer_shapes(self):
        return {f"{self.name}.running_mean": (self.channels,), f"{self.name}.running_var": (self.channels,)}

    def init(self, rng):
        return {f"{self.name}.gamma": np.ones(self.channels), f"{self.name}.beta": np.zeros(self.channels)}

    def init_buffers(self):
        return {f"{self.name}.running_mean": np.zeros(self.channels),
                f"{self.name}.running_var": np.ones(self.channels)}

    def __call__(self, x, params, buffers, training=False):
        km, kv = f"{self.name}.running_mean", f"{self.name}.running_var"
        out, mean, var = batch_norm(x, params[f"{self.name}.gamma"], params[f"{self.name}.beta"],
                                    buffers[km], buffers[kv], training)
        if training:
            buffers[km], buffers[kv] = mean, var
        return out


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int
    bias: bool = True

    def param_shapes(self):
        shapes = {f"{self.name}.weight": (self.out_features, self.in_features)}
        if self.bias:
            shapes[f"{self.name}.bias"] = (self.out_features,)
        return shapes

    def buffer_shapes(self):
        return {}

    def init_buffers(self):
        return {}

    def init(self, rng):
        params = {f"{self.name}.weight": he_normal(rng, (self.out_features, self.in_features), self.in_features)}
        if self.bias:
            params[f"{self.name}.bias"] = np.zeros(self.out_features)
        return params

    def __call__(self, x, params, buffers=None, training=False):
        return fully_connected(x, params[f"{self.name}.weight"], params.get(f"{self.name}.bias"))
