"""Concept-neuron pruning for diffusion denoisers, with a 2-D toy testbed.

Stages: activation traces (:mod:`.trace`), contrastive energy saliency
(:mod:`.saliency`), time-integrated sensitivity (:mod:`.sensitivity`),
neuron selection (:mod:`.selection`), multi-concept mask fusion
(:mod:`.fusion`), metrics (:mod:`.evaluate`), the testbed (:mod:`.toydiff`)
and the command line (:mod:`.cli`).
"""

from .evaluate import RunReport, assignment_accuracy, forget_success_rate, overall_score, summarize
from .fusion import ConceptMask, FusedMaskPlan, FusionWarning, apply_plan, build_mask, fuse_masks, naive_union_plan
from .saliency import StdMode, contrastive_saliency, saliency_for_concept, unified_energy
from .selection import Granularity, NeuronSet, SelectionConfig, select_neurons
from .sensitivity import SensitivityMap, compute_thresholds, integrate_time, sensitivity
from .trace import ActivationTrace, GroupKind, LayerSpec, PromptGroup, TargetKind, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace",
    "ConceptMask",
    "FusedMaskPlan",
    "FusionWarning",
    "Granularity",
    "GroupKind",
    "LayerSpec",
    "NeuronSet",
    "PromptGroup",
    "RunReport",
    "SelectionConfig",
    "SensitivityMap",
    "StdMode",
    "TargetKind",
    "apply_plan",
    "assignment_accuracy",
    "build_mask",
    "compute_thresholds",
    "contrastive_saliency",
    "forget_success_rate",
    "fuse_masks",
    "integrate_time",
    "naive_union_plan",
    "overall_score",
    "read_trace",
    "saliency_for_concept",
    "select_neurons",
    "sensitivity",
    "summarize",
    "unified_energy",
    "write_trace",
]
