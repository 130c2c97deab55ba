"""Small layer classes over the tensor core: parameters, init, registry."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Weight init: uniform scaled by fan-in, keeping pre-activations near 0."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int,
                 stride: int, padding: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(f"{name}/weight",
                                uniform_fanin(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(f"{name}/bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)

    def params(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class ConvTranspose2d:
    """Upsampling transposed conv; weight kept in conv2d orientation
    (in_ch here is the weight's leading axis)."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int,
                 stride: int, padding: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(f"{name}/weight",
                                uniform_fanin(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(f"{name}/bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor, out_hw=None) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding, out_hw=out_hw)

    def params(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Parameter(f"{name}/weight",
                                uniform_fanin(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(f"{name}/bias", np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)

    def params(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class InstanceNorm2d:
    def __init__(self, name: str, channels: int, dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.scale = Parameter(f"{name}/scale", np.ones(channels, dtype=dtype))
        self.shift = Parameter(f"{name}/shift", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.scale, self.shift, eps=self.eps)

    def params(self) -> List[Parameter]:
        return [self.scale, self.shift]


def build_registry(params: Iterable[Parameter]) -> Dict[str, Parameter]:
    """Name -> parameter map; duplicate names are a configuration bug."""
    registry: Dict[str, Parameter] = {}
    for p in params:
        if p.name in registry:
            raise ConfigError(f"duplicate parameter name: {p.name}")
        registry[p.name] = p
    return registry


def param_checksum(params: Iterable[Parameter]) -> str:
    """Order-independent digest of parameter values (name-sorted)."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def cast_params(params: Iterable[Parameter], dtype) -> None:
    """In-place dtype switch (training runs 32-bit, gradient checks 64)."""
    for p in params:
        p.data = p.data.astype(dtype)
        p.grad = None


def state_dict(params: Iterable[Parameter]) -> Dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def load_state(params: Iterable[Parameter], state: Dict[str, np.ndarray],
               strict: bool = True) -> None:
    registry = build_registry(params)
    missing = set(registry) - set(state)
    extra = set(state) - set(registry)
    if strict and (missing or extra):
        raise ConfigError(f"state mismatch; missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in registry.items():
        if name not in state:
            continue
        val = state[name]
        if tuple(val.shape) != tuple(p.data.shape):
            raise ConfigError(f"shape mismatch for {name}: {val.shape} vs {p.data.shape}")
        p.data = val.astype(p.data.dtype, copy=True)
