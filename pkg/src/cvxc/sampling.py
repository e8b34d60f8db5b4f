"""Random sampling helpers shared by the obligation checker and the verifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .expr import Shape


@dataclass(frozen=True)
class SampleConfig:
    """How many points to draw, from where, and with which seed.

    ``box`` is either one ``(lo, hi)`` pair applied to every scalar coordinate
    or a mapping from variable name to such a pair.
    """

    n: int = 1000
    seed: int = 0
    box: object = (-10.0, 10.0)
    max_attempts: int = 100_000

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample count must be >= 1")
        for lo, hi in self._boxes():
            if not lo < hi:
                raise ValueError(f"empty box ({lo}, {hi})")

    def _boxes(self):
        if isinstance(self.box, Mapping):
            return list(self.box.values())
        return [self.box]

    def box_for(self, name: str) -> tuple:
        if isinstance(self.box, Mapping):
            if name in self.box:
                return tuple(self.box[name])
            return tuple(self.box.get("*", (-10.0, 10.0)))
        return tuple(self.box)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


def uniform(rng: np.random.Generator, k: int, shape: Shape, lo: float, hi: float) -> np.ndarray:
    """``k`` uniform draws of a value of ``shape``; matrices come out symmetric."""
    x = rng.uniform(lo, hi, size=(k,) + shape.dims)
    if shape.kind == "matrix":
        x = np.triu(x) + np.swapaxes(np.triu(x, 1), -1, -2)
    return x


def take(batch: Mapping, mask: np.ndarray) -> dict:
    return {k: np.asarray(v)[mask] for k, v in batch.items()}


def concat(parts: list) -> dict:
    if not parts:
        return {}
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def head(batch: Mapping, k: int) -> dict:
    return {name: np.asarray(v)[:k] for name, v in batch.items()}


def batch_len(batch: Mapping) -> int:
    for v in batch.values():
        return len(v)
    return 0


def point(batch: Mapping, i: int) -> dict:
    """Single assignment (plain floats / arrays) from row ``i`` of a batch."""
    out = {}
    for k, v in batch.items():
        x = np.asarray(v)[i]
        out[k] = float(x) if np.ndim(x) == 0 else np.array(x)
    return out


def jsonable(value):
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    return value
