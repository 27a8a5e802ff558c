"""Small parametric building blocks on top of the tensor core."""

from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import Tensor, as_tensor, concat

LN_EPS = 1e-5


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 w_init="trunc_normal", b_init="zeros", bias: bool = True):
        self.w = store.add(f"{name}.w", (d_in, d_out), init=w_init)
        self.b = store.add(f"{name}.b", (d_out,), init=b_init) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        flat = x.ndim == 1
        if flat:
            x = x.reshape(1, -1)
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y.reshape(-1) if flat else y


class LayerNorm:
    """Per-last-dim normalization with learned scale and shift."""

    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = LN_EPS):
        self.scale = store.add(f"{name}.scale", (dim,), init="ones")
        self.shift = store.add(f"{name}.shift", (dim,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.scale + self.shift


class MLP:
    """GELU MLP with an arbitrary number of hidden layers."""

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 final_w_init="trunc_normal", final_b_init="zeros"):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(store, f"{name}.l{i}", a, b,
                       w_init=final_w_init if last else "trunc_normal",
                       b_init=final_b_init if last else "zeros")
            )

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.gelu()
        return x


class PatchConv:
    """Strided conv with kernel == stride (non-overlapping patches)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, stride: int,
                 w_init="trunc_normal"):
        self.stride = stride
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(f"{name}.w", (c_in * stride * stride, c_out), init=w_init)
        self.b = store.add(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        """x: (V, C, H, W) -> (V, c_out, H/s, W/s)."""
        v, c, h, w = x.shape
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"spatial dims {(h, w)} not divisible by stride {s}")
        x = x.reshape(v, c, h // s, s, w // s, s)
        x = x.transpose((0, 2, 4, 1, 3, 5)).reshape(v, h // s, w // s, c * s * s)
        y = x @ self.w + self.b
        return y.transpose((0, 3, 1, 2))


class TransposedConv2x:
    """2x upsampling transposed conv with kernel 2, stride 2."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(f"{name}.w", (c_in, c_out * 4), init="trunc_normal")
        self.b = store.add(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        """x: (V, C, H, W) -> (V, c_out, 2H, 2W)."""
        v, c, h, w = x.shape
        y = x.transpose((0, 2, 3, 1)) @ self.w  # (V, H, W, c_out*4)
        y = y.reshape(v, h, w, self.c_out, 2, 2)
        y = y.transpose((0, 3, 1, 4, 2, 5)).reshape(v, self.c_out, 2 * h, 2 * w)
        return y + self.b.reshape(1, self.c_out, 1, 1)


def identity_conv1x1(store: ParamStore, name: str, channels: int) -> PatchConv:
    conv = PatchConv.__new__(PatchConv)
    conv.stride = 1
    conv.c_in = conv.c_out = channels
    conv.w = store.add(f"{name}.w", (channels, channels), init=np.eye(channels))
    conv.b = store.add(f"{name}.b", (channels,), init="zeros")
    return conv


def sinusoid_features(x: Tensor, n_freq: int) -> Tensor:
    """[sin(2^k pi x), cos(2^k pi x)] for k < n_freq, concatenated over the last dim."""
    parts = []
    for k in range(n_freq):
        scaled = x * (np.pi * (2.0 ** k))
        parts.append(scaled.sin())
        parts.append(scaled.cos())
    return concat(parts, axis=-1)
