"""Minimal parameter container used by every network in the package."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=False)


class Module:
    """Attribute-walking parameter registry.

    Parameters are :class:`Tensor` attributes; submodules are :class:`Module`
    attributes or lists of them. Attribute order is insertion order, so
    parameter names and ordering are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            if p.requires_grad:
                p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_requires_grad(flag)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
