"""Concept-sensitive neuron selection: per-channel top-k, layer top-K, intersection.

Ties are broken by ascending index (row-major for the layer-wide ranking),
which a stable sort on the negated scores gives for free.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ._counts import ceil_count
from .sensitivity import SensitivityMap


class Granularity(str, enum.Enum):
    CHANNEL = "channel"
    LAYER = "layer"
    BOTH = "both"


@dataclass(frozen=True)
class SelectionConfig:
    r2: float
    granularity: Granularity = Granularity.BOTH

    def __post_init__(self):
        if not 0 < self.r2 <= 1:
            raise ValueError(f"r2 must be in (0, 1], got {self.r2}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))


@dataclass(frozen=True)
class NeuronSet:
    layer_id: str
    concept_id: str
    c_out: int
    c_in: int
    members: frozenset

    def __post_init__(self):
        members = frozenset((int(i), int(j)) for i, j in self.members)
        for i, j in members:
            if not (0 <= i < self.c_out and 0 <= j < self.c_in):
                raise IndexError(f"cell ({i}, {j}) outside {self.c_out}x{self.c_in}")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, cell) -> bool:
        return tuple(cell) in self.members

    def sorted_cells(self) -> list[tuple[int, int]]:
        return sorted(self.members)

    def _derive(self, members: Iterable) -> "NeuronSet":
        return NeuronSet(self.layer_id, self.concept_id, self.c_out, self.c_in, frozenset(members))

    def __and__(self, other: "NeuronSet") -> "NeuronSet":
        return self._derive(self.members & other.members)


def _values(a) -> tuple[np.ndarray, str, str]:
    if isinstance(a, SensitivityMap):
        return np.asarray(a.values, dtype=np.float64), a.layer_id, a.concept_id
    return np.asarray(a, dtype=np.float64), "", ""


def channel_candidates(a, r2: float) -> NeuronSet:
    """Union over output channels of the k = ceil(r2 * C_in) strongest inputs."""
    values, layer_id, concept_id = _values(a)
    c_out, c_in = values.shape
    k = ceil_count(r2, c_in)
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    cells = ((i, int(j)) for i in range(c_out) for j in order[i])
    return NeuronSet(layer_id, concept_id, c_out, c_in, frozenset(cells))


def global_candidates(a, r2: float) -> NeuronSet:
    """The K_g = ceil(r2 * C_out * C_in) strongest cells of the whole layer."""
    values, layer_id, concept_id = _values(a)
    c_out, c_in = values.shape
    k = ceil_count(r2, values.size)
    flat = np.argsort(-values.ravel(), kind="stable")[:k]
    cells = (divmod(int(f), c_in) for f in flat)
    return NeuronSet(layer_id, concept_id, c_out, c_in, frozenset(cells))


def select_neurons(a, cfg: SelectionConfig) -> NeuronSet:
    if cfg.granularity is Granularity.CHANNEL:
        return channel_candidates(a, cfg.r2)
    if cfg.granularity is Granularity.LAYER:
        return global_candidates(a, cfg.r2)
    return channel_candidates(a, cfg.r2) & global_candidates(a, cfg.r2)


def write_neurons_csv(sets: Iterable[NeuronSet], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer_id", "concept_id", "i", "j"])
        for ns in sets:
            for i, j in ns.sorted_cells():
                wr.writerow([ns.layer_id, ns.concept_id, i, j])
