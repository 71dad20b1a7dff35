"""Per-concept masks, multi-concept fusion and application to weights."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .selection import NeuronSet


JSON_VERSION = 1


class FusionWarning(UserWarning):
    pass


def _dump(doc: dict) -> str:
    # one top-level key per line, compact values
    body = ",\n".join(f" {json.dumps(k)}: {json.dumps(v)}" for k, v in doc.items())
    return "{\n" + body + "\n}\n"


def _load(text: str) -> dict:
    doc = json.loads(text)
    version = doc.get("version", JSON_VERSION)
    if version != JSON_VERSION:
        raise ValueError(f"unsupported mask/plan JSON version {version}")
    return doc


@dataclass(frozen=True)
class ConceptMask:
    layer_id: str
    concept_id: str
    mask: np.ndarray  # C_out x C_in, uint8

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def cells(self) -> frozenset:
        return frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(self.mask)))

    def to_json(self) -> str:
        c_out, c_in = self.shape
        doc = {
            "version": JSON_VERSION,
            "layer_id": self.layer_id,
            "concept_id": self.concept_id,
            "c_out": c_out,
            "c_in": c_in,
            "cells": [list(c) for c in sorted(self.cells())],
        }
        return _dump(doc)

    @classmethod
    def from_json(cls, text: str) -> "ConceptMask":
        doc = _load(text)
        ns = NeuronSet(doc["layer_id"], doc["concept_id"], doc["c_out"], doc["c_in"], frozenset(map(tuple, doc["cells"])))
        return build_mask(ns, doc["c_out"], doc["c_in"])


@dataclass(frozen=True)
class FusedMaskPlan:
    layer_id: str
    c_out: int
    c_in: int
    counts: np.ndarray  # per-cell number of concepts selecting it
    concept_total: int
    alpha: float | None  # None for the naive union plan
    tau_ca: int | None
    prune_set: frozenset
    agnostic_set: frozenset
    strategy: str = "fused"

    @property
    def pruned_fraction(self) -> float:
        return len(self.prune_set) / (self.c_out * self.c_in)

    def counts_histogram(self) -> dict[int, int]:
        values, freq = np.unique(self.counts, return_counts=True)
        hist = {s: 0 for s in range(self.concept_total + 1)}
        hist.update({int(v): int(f) for v, f in zip(values, freq)})
        return hist

    def to_json(self) -> str:
        doc = {
            "version": JSON_VERSION,
            "layer_id": self.layer_id,
            "c_out": self.c_out,
            "c_in": self.c_in,
            "strategy": self.strategy,
            "concept_total": self.concept_total,
            "alpha": self.alpha,
            "tau_ca": self.tau_ca,
            "prune": [list(c) for c in sorted(self.prune_set)],
            "agnostic": [list(c) for c in sorted(self.agnostic_set)],
            "counts_histogram": {str(k): v for k, v in self.counts_histogram().items()},
            "cell_counts": [[int(i), int(j), int(self.counts[i, j])] for i, j in zip(*np.nonzero(self.counts))],
        }
        return _dump(doc)

    @classmethod
    def from_json(cls, text: str) -> "FusedMaskPlan":
        doc = _load(text)
        prune = frozenset(tuple(c) for c in doc["prune"])
        agnostic = frozenset(tuple(c) for c in doc["agnostic"])
        counts = np.zeros((doc["c_out"], doc["c_in"]), dtype=np.int64)
        for i, j, s in doc["cell_counts"]:
            counts[i, j] = s
        return cls(
            doc["layer_id"],
            doc["c_out"],
            doc["c_in"],
            counts,
            doc["concept_total"],
            doc["alpha"],
            doc["tau_ca"],
            prune,
            agnostic,
            doc.get("strategy", "fused"),
        )


def build_mask(neurons: NeuronSet, c_out: int, c_in: int) -> ConceptMask:
    mask = np.zeros((c_out, c_in), dtype=np.uint8)
    for i, j in neurons.members:
        if not (0 <= i < c_out and 0 <= j < c_in):
            raise IndexError(f"cell ({i}, {j}) outside {c_out}x{c_in}")
        mask[i, j] = 1
    return ConceptMask(neurons.layer_id, neurons.concept_id, mask)


def _count(masks: Sequence[ConceptMask]) -> np.ndarray:
    if len(masks) < 1:
        raise ValueError("need at least one concept mask")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("concept masks differ in shape")
    if len({m.layer_id for m in masks}) > 1:
        raise ValueError("concept masks belong to different layers")
    return np.sum([m.mask.astype(np.int64) for m in masks], axis=0)


def _cells(flags: np.ndarray) -> frozenset:
    return frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(flags)))


def agnostic_threshold(alpha: float, concept_total: int) -> int:
    # round before ceil so that 0.6 * 10 gives 6, not 7
    return math.ceil(round(alpha * concept_total, 9))


def fuse_masks(masks: Sequence[ConceptMask], alpha: float) -> FusedMaskPlan:
    """Prune cells hit by 0 < s < ceil(alpha * C) concepts, keep those with s >= ceil(alpha * C)."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if len(masks) < 2:
        raise ValueError("fusion needs at least two concept masks; prune a single mask directly")
    counts = _count(masks)
    total = len(masks)
    tau_ca = agnostic_threshold(alpha, total)
    if tau_ca <= 1:
        warnings.warn(
            f"concept-agnostic threshold {tau_ca} with {total} concept(s): every selected cell is kept",
            FusionWarning,
            stacklevel=2,
        )
    c_out, c_in = counts.shape
    return FusedMaskPlan(
        masks[0].layer_id,
        c_out,
        c_in,
        counts,
        total,
        alpha,
        tau_ca,
        _cells((counts > 0) & (counts < tau_ca)),
        _cells(counts >= tau_ca),
    )


def naive_union_plan(masks: Sequence[ConceptMask]) -> FusedMaskPlan:
    """Prune every cell selected by at least one concept."""
    counts = _count(masks)
    c_out, c_in = counts.shape
    return FusedMaskPlan(
        masks[0].layer_id, c_out, c_in, counts, len(masks), None, None, _cells(counts > 0), frozenset(), "union"
    )


def plan_for_masks(masks: Sequence[ConceptMask], alpha: float) -> FusedMaskPlan:
    """Fuse several concept masks; a single mask is pruned directly."""
    if len(masks) == 1:
        warnings.warn("single concept mask: skipping fusion and pruning it directly", FusionWarning, stacklevel=2)
        plan = naive_union_plan(masks)
        return FusedMaskPlan(
            plan.layer_id, plan.c_out, plan.c_in, plan.counts, 1, alpha, None, plan.prune_set, frozenset(), "direct"
        )
    return fuse_masks(masks, alpha)


def apply_plan(weights, plan: FusedMaskPlan) -> np.ndarray:
    """Copy of ``weights`` with exactly the prune-set cells zeroed."""
    w = np.array(weights, copy=True)
    if w.shape != (plan.c_out, plan.c_in):
        raise ValueError(f"weights {w.shape} do not match plan {(plan.c_out, plan.c_in)}")
    cells = plan.prune_set - plan.agnostic_set
    if cells:
        rows, cols = zip(*cells)
        w[list(rows), list(cols)] = 0
    return w
