"""Named collections of learnable leaves plus non-learnable buffers."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def conv_fans(shape) -> tuple[int, int]:
    """torch-style fans for an ``(out, in, *kernel)`` weight."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


class ParamSet:
    """Ordered mapping ``id -> Tensor`` (leaves) plus ``id -> ndarray`` (buffers).

    Buffers hold batch-norm running statistics: they are saved, cloned and
    averaged by the teacher update, but never receive gradients.
    """

    def __init__(self):
        self.leaves: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.leaves or name in self.buffers:
            raise ContractError(f"duplicate parameter id {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.leaves[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.leaves or name in self.buffers:
            raise ContractError(f"duplicate parameter id {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self.leaves

    def __iter__(self) -> Iterator[str]:
        return iter(self.leaves)

    def __len__(self) -> int:
        return len(self.leaves)

    def buffer(self, name: str) -> np.ndarray | None:
        return self.buffers.get(name)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.leaves.items()] + [
            (k, v.shape) for k, v in self.buffers.items()
        ]

    def count(self) -> int:
        """Number of learnable scalars."""
        return sum(t.size for t in self.leaves.values())

    def zero_grad(self) -> None:
        for t in self.leaves.values():
            t.zero_grad()

    def clone(self) -> ParamSet:
        out = ParamSet()
        for k, t in self.leaves.items():
            out.add(k, t.data.copy())
        for k, b in self.buffers.items():
            out.add_buffer(k, b.copy())
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Every leaf and buffer array by id (shared, not copied)."""
        d = {k: t.data for k, t in self.leaves.items()}
        d.update(self.buffers)
        return d
