"""Forgetting/preservation metrics, Overall Score and Forget-Success Rate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def overall_score(preserve_acc: float, forget_acc: float) -> float:
    """Harmonic mean of preserving accuracy P and forgetting rate 1 - F, in percent."""
    p, f = float(preserve_acc), float(forget_acc)
    if not (0 <= p <= 1 and 0 <= f <= 1):
        raise ValueError("accuracies must lie in [0, 1]")
    r = 1.0 - f
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r) * 100.0


def forget_success_rate(orig_scores: Sequence[float], edited_scores: Sequence[float]) -> float:
    """Fraction of prompts whose edited score is strictly below the original one."""
    orig = np.asarray(orig_scores, dtype=np.float64)
    edited = np.asarray(edited_scores, dtype=np.float64)
    if orig.shape != edited.shape or orig.ndim != 1:
        raise ValueError("score lists must have equal length")
    if orig.size == 0:
        raise ValueError("need at least one score pair")
    return float(np.mean(edited < orig))


def nearest_mode(samples, modes) -> np.ndarray:
    """Index of the nearest mode for each sample; ties go to the lower index."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    m = np.asarray(modes, dtype=np.float64).reshape(-1, 2)
    d2 = ((x[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def assignment_accuracy(samples, target_mode_index: int, modes) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    modes = np.asarray(modes, dtype=np.float64)
    if samples.size == 0 or modes.size == 0:
        raise ValueError("samples and modes must be non-empty")
    return float(np.mean(nearest_mode(samples, modes) == target_mode_index))


@dataclass
class RunReport:
    acc_pre: dict[str, float]
    acc_post: dict[str, float]
    forget: list[str]
    preserve: list[str]
    pruned_fraction: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.forget) & set(self.preserve):
            raise ValueError("forget and preserve sets overlap")
        for name, acc in (*self.acc_pre.items(), *self.acc_post.items()):
            if not 0 <= acc <= 1:
                raise ValueError(f"accuracy of {name!r} outside [0, 1]")
        missing = [c for c in (*self.forget, *self.preserve) if c not in self.acc_post]
        if missing:
            raise ValueError(f"no post-prune accuracy for {missing}")

    def to_json(self) -> str:
        doc = {
            "acc_pre": self.acc_pre,
            "acc_post": self.acc_post,
            "forget": self.forget,
            "preserve": self.preserve,
            "pruned_fraction": self.pruned_fraction,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        return cls(
            {str(k): float(v) for k, v in doc.get("acc_pre", {}).items()},
            {str(k): float(v) for k, v in doc["acc_post"].items()},
            [str(c) for c in doc.get("forget", [])],
            [str(c) for c in doc.get("preserve", [])],
            {str(k): float(v) for k, v in doc.get("pruned_fraction", {}).items()},
        )


@dataclass
class Summary:
    forget_acc: float | None
    preserve_acc: float | None
    overall: float | None
    pruned_fraction_total: float | None
    rows: list[dict]

    def concept_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["concept_id", "role", "acc_pre", "acc_post"])
        for row in self.rows:
            wr.writerow([row["concept_id"], row["role"], _fmt(row["acc_pre"]), _fmt(row["acc_post"])])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["F", "P", "overall_score", "pruned_fraction_total"])
        wr.writerow([_fmt(v) for v in (self.forget_acc, self.preserve_acc, self.overall, self.pruned_fraction_total)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def summarize(report: RunReport, cells_per_layer: dict[str, int] | None = None) -> Summary:
    """Per-concept rows plus unweighted F / P means and the Overall Score.

    A side with no concepts is reported as absent, and so is the Overall
    Score. ``cells_per_layer`` weights the per-layer pruned fractions when
    totalling them; without it the layers are averaged.
    """
    rows = []
    for role, concepts in (("forget", report.forget), ("preserve", report.preserve)):
        for c in concepts:
            rows.append({"concept_id": c, "role": role, "acc_pre": report.acc_pre.get(c), "acc_post": report.acc_post[c]})
    f = float(np.mean([report.acc_post[c] for c in report.forget])) if report.forget else None
    p = float(np.mean([report.acc_post[c] for c in report.preserve])) if report.preserve else None
    overall = overall_score(p, f) if f is not None and p is not None else None
    total = None
    if report.pruned_fraction:
        if cells_per_layer:
            n = sum(cells_per_layer[k] for k in report.pruned_fraction)
            total = sum(report.pruned_fraction[k] * cells_per_layer[k] for k in report.pruned_fraction) / n
        else:
            total = float(np.mean(list(report.pruned_fraction.values())))
    return Summary(f, p, overall, total, rows)


def scatter_svg(clouds: dict, modes, title: str = "", size: int = 360) -> str:
    """Minimal SVG scatter of labelled 2-D point clouds with the modes marked.

    ``clouds`` maps a legend label to an (n, 2) array; up to four clouds get
    distinct colours.
    """
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    modes = np.asarray(modes, dtype=np.float64).reshape(-1, 2)
    pts = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in clouds.values()]
    every = np.concatenate([modes, *pts]) if pts else modes
    every = every[np.all(np.isfinite(every), axis=1)]
    half = max(1.0, float(np.max(np.abs(every))) * 1.1) if every.size else 1.0
    pad = 20

    def px(x, y):
        sx = pad + (x + half) / (2 * half) * (size - 2 * pad)
        sy = pad + (half - y) / (2 * half) * (size - 2 * pad)
        return f"{sx:.2f}", f"{sy:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="{pad}" y="14" font-size="12" font-family="sans-serif">{_escape(title)}</text>',
    ]
    for k, (label, cloud) in enumerate(zip(clouds, pts)):
        colour = colours[k % len(colours)]
        out.append(f'<g fill="{colour}" fill-opacity="0.5"><title>{_escape(str(label))}</title>')
        for x, y in cloud:
            cx, cy = px(x, y)
            out.append(f'<circle cx="{cx}" cy="{cy}" r="1.5"/>')
        out.append("</g>")
        out.append(
            f'<text x="{size - 110}" y="{16 + 14 * k}" font-size="11" font-family="sans-serif" fill="{colour}">'
            f"{_escape(str(label))}</text>"
        )
    for x, y in modes:
        cx, cy = px(x, y)
        out.append(f'<circle cx="{cx}" cy="{cy}" r="4" fill="none" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
