"""Trainable layers built on the autodiff tensor: affine, MLP, conv."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, conv2d, linear, relu

__all__ = ["glorot_uniform", "Linear", "MLP", "Conv2d", "mlp_forward"]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine layer ``x @ W + b`` with Glorot-uniform W and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "linear", bias: bool = True):
        self.weight = Parameter(
            glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)),
            name=f"{name}/weight")
        self.bias = Parameter(np.zeros(out_dim), name=f"{name}/bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def mlp_forward(layers, x: Tensor) -> Tensor:
    """Alternating affine + relu over ``layers`` (Linear or (W, b) pairs);
    the final layer is affine only."""
    n = len(layers)
    for i, layer in enumerate(layers):
        if isinstance(layer, Linear):
            x = layer(x)
        else:
            weight, bias = layer
            x = linear(x, weight, bias)
        if i < n - 1:
            x = relu(x)
    return x


class MLP:
    """Stack of Linear layers with relu between them, affine at the end."""

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator,
                 name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("MLP needs at least an input and an output width")
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, name=f"{name}/{i}")
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Conv2d:
    """Convolution layer wrapping the conv2d op, with per-channel bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1,
                 padding: str = "same", name: str = "conv", bias: bool = True):
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        self.kernels = Parameter(
            glorot_uniform(rng, fan_in, fan_out,
                           (out_channels, in_channels, kernel_size, kernel_size)),
            name=f"{name}/kernels")
        self.bias = (Parameter(np.zeros((out_channels, 1, 1)), name=f"{name}/bias")
                     if bias else None)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.kernels, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias
        return out

    def parameters(self) -> list[Parameter]:
        return [self.kernels] if self.bias is None else [self.kernels, self.bias]
