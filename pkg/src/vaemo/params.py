"""Named parameter storage.

Parameters live in a flat name -> Tensor map with a kind tag per entry
("weight", "bias", "layer_norm", "embedding").  Kinds drive the weight
decay mask and the stage-two trainable mask, so they are part of the
model contract, not just bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError

KINDS = ("weight", "bias", "layer_norm", "embedding")


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._kinds: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, kind: str = "weight") -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if kind not in KINDS:
            raise ConfigError(f"unknown parameter kind {kind!r} for {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._kinds[name] = kind
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(
        self,
        arrays: dict[str, np.ndarray],
        ignore_prefixes: tuple[str, ...] = (),
        allow_missing_prefixes: tuple[str, ...] = (),
    ) -> None:
        """Copy values in by name; every store entry must be covered.

        Entries under ``allow_missing_prefixes`` may be absent from the
        checkpoint and keep their fresh initialization (adapters layered
        onto a first-stage checkpoint).  Checkpoint names the store does
        not know are rejected unless they fall under ``ignore_prefixes``.
        """
        for name, t in self._params.items():
            if name not in arrays:
                if any(name.startswith(p) for p in allow_missing_prefixes):
                    continue
                raise ShapeError(f"checkpoint is missing parameter {name!r}")
            value = np.asarray(arrays[name])
            if value.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {value.shape}, expected {t.data.shape}"
                )
            t.data = value.astype(self.dtype, copy=True)
        for name in arrays:
            if name in self._params:
                continue
            if not any(name.startswith(p) for p in ignore_prefixes):
                raise ShapeError(f"checkpoint carries unexpected parameter {name!r}")

    def count(self, predicate: Callable[[str], bool] | None = None) -> int:
        return sum(
            t.data.size for name, t in self._params.items() if predicate is None or predicate(name)
        )


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    vals = rng.normal(0.0, std, size=shape)
    return np.clip(vals, -2.0 * std, 2.0 * std)
