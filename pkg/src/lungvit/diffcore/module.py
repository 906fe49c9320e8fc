from __future__ import annotations

from typing import Iterator

import numpy as np

from .array import DEFAULT_DTYPE, DiffArray


class Module:
    """Container of named trainable arrays and child modules.

    Registration order is preserved, so parameter enumeration (and therefore
    checkpoints and optimizer state) is deterministic.
    """

    def __init__(self):
        self._params: dict[str, DiffArray] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray, dtype=DEFAULT_DTYPE) -> DiffArray:
        p = DiffArray(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffArray]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
        for name, p in own.items():
            p.data[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
