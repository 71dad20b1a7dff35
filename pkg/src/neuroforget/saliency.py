"""Per-connection energy saliency and its concept-vs-base contrast."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import ActivationTrace, GroupKind, TraceError, slice_records

DEFAULT_EPSILON = 1e-12


class StdMode(str, enum.Enum):
    POPULATION = "population"
    SAMPLE = "sample"

    @property
    def ddof(self) -> int:
        return 0 if self is StdMode.POPULATION else 1


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True)
class EnergySlice:
    layer_id: str
    timestep: int
    group_id: str
    prompt_index: int
    values: np.ndarray  # C_out x C_in


@dataclass
class ContrastiveSaliency:
    layer_id: str
    concept_id: str
    timesteps: list[int]
    values: np.ndarray  # (T_w, C_out, C_in)
    epsilon: float = DEFAULT_EPSILON
    std_mode: StdMode = StdMode.POPULATION

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise SaliencyError(f"{name} contains non-finite values")


def unified_energy(weights, activations, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Energy saliency of every connection of a linear layer.

    ``U[i, j] = |W[i, j]| * ||X_j|| * |<X_j, Y_i>| / (||X_j|| ||Y_i|| + eps)``
    where ``X_j`` is column j of the N x C_in activations and
    ``Y_i = sum_j' W[i, j'] X_j'``.

    ``activations`` may carry leading batch dimensions (..., N, C_in); the
    result then has shape (..., C_out, C_in).
    """
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(activations, dtype=np.float64)
    if w.ndim != 2 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise SaliencyError(f"shape mismatch: W {w.shape}, X {x.shape}")
    if epsilon < 0:
        raise SaliencyError("epsilon must be non-negative")
    _check_finite("weights", w)
    _check_finite("activations", x)

    y = x @ w.T  # (..., N, C_out)
    x_norm = np.sqrt(np.einsum("...nj,...nj->...j", x, x))  # (..., C_in)
    y_norm = np.sqrt(np.einsum("...ni,...ni->...i", y, y))  # (..., C_out)
    inner = np.abs(np.einsum("...ni,...nj->...ij", y, x))  # (..., C_out, C_in)
    denom = y_norm[..., :, None] * x_norm[..., None, :] + epsilon
    cos = np.divide(inner, denom, out=np.zeros_like(inner), where=denom > 0)
    return np.abs(w) * x_norm[..., None, :] * cos


def unified_energy_reference(weights, activations, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Element-by-element evaluation of the energy saliency (slow oracle)."""
    w = [[float(v) for v in row] for row in np.asarray(weights)]
    x = [[float(v) for v in row] for row in np.asarray(activations)]
    c_out, c_in, n = len(w), len(w[0]), len(x)
    cols = [[x[r][j] for r in range(n)] for j in range(c_in)]
    ys = [[sum(w[i][jj] * x[r][jj] for jj in range(c_in)) for r in range(n)] for i in range(c_out)]
    out = np.zeros((c_out, c_in))
    for i in range(c_out):
        y_norm = sum(v * v for v in ys[i]) ** 0.5
        for j in range(c_in):
            x_norm = sum(v * v for v in cols[j]) ** 0.5
            inner = abs(sum(cols[j][r] * ys[i][r] for r in range(n)))
            denom = x_norm * y_norm + epsilon
            cos = inner / denom if denom > 0 else 0.0
            out[i, j] = abs(w[i][j]) * x_norm * cos
    return out


def _stack(slices) -> np.ndarray:
    mats = [np.asarray(s.values if isinstance(s, EnergySlice) else s, dtype=np.float64) for s in slices]
    if not mats:
        return np.empty((0, 0, 0))
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise SaliencyError("energy slices differ in shape")
    return np.stack(mats)


def _check_keys(concept_slices, base_slices) -> None:
    keyed = [s for s in (*concept_slices, *base_slices) if isinstance(s, EnergySlice)]
    if len({(s.layer_id, s.timestep) for s in keyed}) > 1:
        raise SaliencyError("energy slices must share layer and timestep")


def contrast_stacks(concept: np.ndarray, base: np.ndarray, std_mode: StdMode = StdMode.POPULATION) -> np.ndarray:
    """``max(0, mean_c - mean_b - std_b)`` over axis 0 of two stacks."""
    std_mode = StdMode(std_mode)
    if concept.shape[0] < 1:
        raise SaliencyError("need at least one concept prompt")
    if base.shape[0] < 2:
        raise SaliencyError("need at least two base prompts")
    if concept.shape[1:] != base.shape[1:]:
        raise SaliencyError(f"shape mismatch: {concept.shape[1:]} vs {base.shape[1:]}")
    mu_c = concept.mean(axis=0)
    mu_b = base.mean(axis=0)
    sigma_b = base.std(axis=0, ddof=std_mode.ddof)
    return np.maximum(0.0, mu_c - mu_b - sigma_b)


def contrastive_saliency(
    concept_slices: Sequence, base_slices: Sequence, std_mode: StdMode = StdMode.POPULATION
) -> np.ndarray:
    """Contrastive concept saliency of one (layer, timestep).

    Slices are :class:`EnergySlice` objects or bare C_out x C_in matrices.
    """
    _check_keys(concept_slices, base_slices)
    if len(base_slices) < 2:
        raise SaliencyError("need at least two base prompts")
    if len(concept_slices) < 1:
        raise SaliencyError("need at least one concept prompt")
    return contrast_stacks(_stack(concept_slices), _stack(base_slices), std_mode)


def _prompt_stack(trace: ActivationTrace, layer_id: str, t: int, group_id: str) -> np.ndarray:
    recs = slice_records(trace, layer_id, t, group_id)
    expected = trace.group(group_id).prompt_count
    if len(recs) != expected:
        raise TraceError(
            f"missing records for layer {layer_id!r}, timestep {t}, group {group_id!r}: "
            f"{len(recs)}/{expected} prompts"
        )
    return np.stack([r.activations for r in recs]).astype(np.float64)


def saliency_for_concept(
    trace: ActivationTrace,
    layer_id: str,
    concept_group: str,
    base_group: str,
    timestep_window: tuple[int, int] | None = None,
    epsilon: float = DEFAULT_EPSILON,
    std_mode: StdMode = StdMode.POPULATION,
) -> ContrastiveSaliency:
    """Contrastive saliency stack of one layer over an inclusive timestep window."""
    spec = trace.layer(layer_id)
    cg, bg = trace.group(concept_group), trace.group(base_group)
    if cg.kind is not GroupKind.CONCEPT:
        raise SaliencyError(f"group {concept_group!r} is not a CONCEPT group")
    if bg.kind is not GroupKind.BASE:
        raise SaliencyError(f"group {base_group!r} is not a BASE group")
    start, end = timestep_window or (1, trace.total_timesteps)
    if not 1 <= start <= end <= trace.total_timesteps:
        raise SaliencyError(f"window [{start}, {end}] not within [1, {trace.total_timesteps}]")

    w = trace.weights[layer_id]
    timesteps = list(range(start, end + 1))
    out = np.empty((len(timesteps), spec.c_out, spec.c_in))
    for k, t in enumerate(timesteps):
        u_c = unified_energy(w, _prompt_stack(trace, layer_id, t, concept_group), epsilon)
        u_b = unified_energy(w, _prompt_stack(trace, layer_id, t, base_group), epsilon)
        out[k] = contrast_stacks(u_c, u_b, std_mode)
    return ContrastiveSaliency(layer_id, cg.concept_id, timesteps, out, epsilon, StdMode(std_mode))


def write_saliency_csv(saliencies: Sequence[ContrastiveSaliency], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer_id", "concept_id", "timestep", "i", "j", "S"])
        for sal in saliencies:
            c_out, c_in = sal.shape
            for k, t in enumerate(sal.timesteps):
                mat = sal.values[k]
                for i in range(c_out):
                    for j in range(c_in):
                        wr.writerow([sal.layer_id, sal.concept_id, t, i, j, repr(float(mat[i, j]))])


def read_saliency_csv(path) -> list[ContrastiveSaliency]:
    cells: dict[tuple[str, str], dict[int, dict[tuple[int, int], float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["layer_id"], row["concept_id"])
            cells.setdefault(key, {}).setdefault(int(row["timestep"]), {})[
                (int(row["i"]), int(row["j"]))
            ] = float(row["S"])
    out = []
    for (layer_id, concept_id), by_t in cells.items():
        timesteps = sorted(by_t)
        c_out = 1 + max(i for i, _ in by_t[timesteps[0]])
        c_in = 1 + max(j for _, j in by_t[timesteps[0]])
        values = np.zeros((len(timesteps), c_out, c_in))
        for k, t in enumerate(timesteps):
            for (i, j), v in by_t[t].items():
                values[k, i, j] = v
        out.append(ContrastiveSaliency(layer_id, concept_id, timesteps, values))
    return out
