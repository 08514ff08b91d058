from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(shape, rng: np.random.Generator, std: float | None = None, zero: bool = False) -> Tensor:
    """Trainable leaf. Default init is scaled normal with std 1/sqrt(fan_in)."""
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    if std is None:
        std = 1.0 / np.sqrt(shape[-2] if len(shape) >= 2 else shape[0])
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Container that discovers parameters through its attributes.

    Attributes that are Tensors with ``requires_grad``, Modules, or lists of
    either are walked in insertion order, which makes parameter names and
    ordering deterministic. Names starting with an underscore are private
    (caches) and never walked.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Non-trainable Tensor attributes (persisted, never optimized)."""
        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from _walk(value, f"{prefix}{key}", buffers=True)

    def state_dict(self) -> dict[str, np.ndarray]:
        items = [*self.named_parameters(), *self.named_buffers()]
        return {name: p.data.copy() for name, p in items}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict([*self.named_parameters(), *self.named_buffers()])
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


def _walk(value, name: str, buffers: bool = False):
    if isinstance(value, Tensor):
        if value.requires_grad != buffers:
            value.name = name
            yield name, value
    elif isinstance(value, Module):
        walker = value.named_buffers if buffers else value.named_parameters
        yield from walker(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}", buffers)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter((d_in, d_out), rng)
        self.bias = parameter((d_out,), rng, zero=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class MLP(Module):
    """Stack of Linear layers, each followed by LeakyReLU."""

    def __init__(self, dims: list[int], rng: np.random.Generator, slope: float = 0.01):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.leaky_relu(layer(x), self.slope)
        return x
