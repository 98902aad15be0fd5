"""Named trainable parameters and their initializers."""
from __future__ import annotations

import numpy as np

from .tensor import ConfigError, Tensor, conv2d, linear

__all__ = ["ParamStore", "uniform_init", "zeros_param", "Conv2d", "Linear"]


class ParamStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor) or not tensor.requires_grad:
            raise ConfigError(f"parameter {name!r} must be a tensor with requires_grad")
        self._items[name] = tensor
        return tensor

    def extend(self, named) -> None:
        for name, tensor in named:
            self.add(name, tensor)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.grad = None

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(k, t.data) for k, t in self._items.items()]

    def load_arrays(self, named: dict) -> None:
        """Copy arrays into existing parameters by name; names must match."""
        missing = [k for k in self._items if k not in named]
        extra = [k for k in named if k not in self._items]
        if missing or extra:
            raise ConfigError(
                f"parameter names do not line up (missing {missing}, unexpected {extra})")
        for k, t in self._items.items():
            arr = np.asarray(named[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"parameter {k!r} shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Uniform(-k, k) with k = 1/sqrt(fan_in)."""
    if fan_in < 1:
        raise ConfigError("fan_in must be positive")
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d:
    """Convolution layer owning its weight and optional bias."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True,
                 dtype=np.float32):
        fan_in = (c_in // groups) * kernel * kernel
        self.w = uniform_init(rng, (c_out, c_in // groups, kernel, kernel), fan_in, dtype)
        self.b = zeros_param((c_out,), dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride,
                      padding=self.padding, groups=self.groups)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b

    def num_scalars(self) -> int:
        n = self.w.data.size
        if self.b is not None:
            n += self.b.data.size
        return n


class Linear:
    """Fully connected layer owning its weight and bias."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float32):
        self.w = uniform_init(rng, (d_out, d_in), d_in, dtype)
        self.b = zeros_param((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b

    def num_scalars(self) -> int:
        n = self.w.data.size
        if self.b is not None:
            n += self.b.data.size
        return n
