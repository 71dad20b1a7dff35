"""Time-integrated concept sensitivity with per-timestep adaptive thresholds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._counts import ceil_count
from .saliency import ContrastiveSaliency


@dataclass
class ThresholdTable:
    layer_id: str
    timesteps: list[int]
    tau: np.ndarray  # one threshold per timestep
    r1: float


@dataclass
class SensitivityMap:
    layer_id: str
    concept_id: str
    values: np.ndarray  # C_out x C_in
    window_length: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def kth_largest(values: np.ndarray, k: int) -> float:
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty saliency matrix")
    return float(np.partition(flat, flat.size - k)[flat.size - k])


def compute_thresholds(saliency: ContrastiveSaliency, r1: float) -> ThresholdTable:
    """tau_t = the k1-th largest saliency at each timestep, k1 = ceil(r1 * C_out * C_in)."""
    if saliency.values.size == 0:
        raise ValueError("empty saliency matrix")
    cells = saliency.values.shape[1] * saliency.values.shape[2]
    k1 = ceil_count(r1, cells)
    tau = np.array([kth_largest(s, k1) for s in saliency.values])
    return ThresholdTable(saliency.layer_id, list(saliency.timesteps), tau, r1)


def integrate_time(saliency: ContrastiveSaliency, thresholds: ThresholdTable) -> SensitivityMap:
    """Half mean saliency plus half the fraction of steps with S strictly above tau."""
    if list(thresholds.timesteps) != list(saliency.timesteps):
        raise ValueError("threshold table does not cover the saliency window")
    s = saliency.values
    t_w = s.shape[0]
    strength = s.sum(axis=0) / t_w
    frequency = (s > thresholds.tau[:, None, None]).sum(axis=0) / t_w
    return SensitivityMap(saliency.layer_id, saliency.concept_id, 0.5 * strength + 0.5 * frequency, t_w)


def sensitivity(saliency: ContrastiveSaliency, r1: float) -> SensitivityMap:
    return integrate_time(saliency, compute_thresholds(saliency, r1))


def write_sensitivity_csv(maps: Sequence[SensitivityMap], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer_id", "concept_id", "i", "j", "A"])
        for m in maps:
            c_out, c_in = m.shape
            for i in range(c_out):
                for j in range(c_in):
                    wr.writerow([m.layer_id, m.concept_id, i, j, repr(float(m.values[i, j]))])


def read_sensitivity_csv(path) -> list[SensitivityMap]:
    cells: dict[tuple[str, str], dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault((row["layer_id"], row["concept_id"]), {})[(int(row["i"]), int(row["j"]))] = float(
                row["A"]
            )
    out = []
    for (layer_id, concept_id), entry in cells.items():
        c_out = 1 + max(i for i, _ in entry)
        c_in = 1 + max(j for _, j in entry)
        values = np.zeros((c_out, c_in))
        for (i, j), v in entry.items():
            values[i, j] = v
        # the CSV does not carry the window length
        out.append(SensitivityMap(layer_id, concept_id, values, 0))
    return out
