"""Config-driven pipeline: train/trace -> saliency -> sensitivity -> select -> fuse -> apply -> eval.

Every stage reads its inputs from an artifact directory and writes its
outputs next to them, so ``run`` is literally the stages chained in order.
Exit codes: 0 success, 1 stage failure (stage name on stderr), 2 config error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import toydiff as td
from .evaluate import RunReport, assignment_accuracy, scatter_svg, summarize
from .fusion import ConceptMask, FusedMaskPlan, apply_plan, build_mask, plan_for_masks
from .saliency import ContrastiveSaliency, StdMode, read_saliency_csv, saliency_for_concept, write_saliency_csv
from .selection import Granularity, NeuronSet, SelectionConfig, select_neurons
from .sensitivity import SensitivityMap, read_sensitivity_csv, sensitivity, write_sensitivity_csv
from .trace import read_trace, write_trace

STAGES = ("trace", "saliency", "sensitivity", "select", "fuse", "apply", "eval")

MODEL_FILE = "model.fiam"
LOSS_FILE = "loss.csv"
TRACE_FILE = "trace.fiat"
SALIENCY_FILE = "saliency.csv"
SENSITIVITY_FILE = "sensitivity.csv"
MASK_DIR = "masks"
PLAN_DIR = "plans"
PRUNED_FILE = "pruned.fiam"
REPORT_FILE = "report.json"
CONCEPT_CSV = "concepts.csv"
AGGREGATE_CSV = "aggregate.csv"
SAMPLES_FILE = "samples.csv"
CONFIG_FILE = "config.ini"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# -- configuration ----------------------------------------------------------


def parse_fraction(text) -> float:
    """``"5%"`` -> 0.05; plain numbers are taken as fractions."""
    s = str(text).strip()
    try:
        return float(s[:-1]) / 100.0 if s.endswith("%") else float(s)
    except ValueError:
        raise ConfigError(f"not a number or percentage: {text!r}") from None


def parse_percent(text) -> float:
    """``"0.7"`` or ``"0.7%"`` -> 0.007."""
    s = str(text).strip()
    try:
        return float(s.removesuffix("%")) / 100.0
    except ValueError:
        raise ConfigError(f"not a percentage: {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected integers, got {text!r}") from None


def parse_window(text: str) -> tuple[int, int]:
    parts = _ints(text.replace("..", " ").replace("-", " "))
    if len(parts) != 2:
        raise ConfigError(f"window must be 'start, end', got {text!r}")
    return parts[0], parts[1]


def _parse_modes(text: str) -> tuple:
    try:
        modes = tuple(tuple(float(v) for v in m.split(",")) for m in text.split(";") if m.strip())
    except ValueError:
        raise ConfigError(f"bad modes list {text!r}") from None
    return modes


def _parse_r2_map(text: str) -> tuple:
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        key, sep, value = item.partition(":")
        if not sep:
            raise ConfigError(f"per-concept r2 entry must be 'concept: value', got {item!r}")
        out.append((_ints(key)[0], parse_fraction(value)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class PipelineConfig:
    modes: tuple = ((3.0, 3.0), (-3.0, 3.0), (-3.0, -3.0), (3.0, -3.0))
    mode_std: float = 0.3
    samples_per_concept: int = 1000
    hidden: int = 64
    timesteps: int = 50
    steps: int = 2000
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 256
    cond_drop: float = 0.2
    embed_l1: float = 0.004
    embed_scale: float = 3.0
    data_seed: int = 0
    train_seed: int = 0
    trace_seed: int = 1
    eval_seed: int = 100
    prompts_per_group: int = 5
    points_per_prompt: int = 32
    target_layers: tuple = (td.FFN2,)
    window: tuple = (1, 10)
    std_mode: StdMode = StdMode.POPULATION
    epsilon: float = 1e-12
    r1: float = 0.05
    r2: float = 0.01
    r2_per_concept: tuple = ()
    granularity: Granularity = Granularity.BOTH
    alpha: float = 0.6
    forget: tuple = (0, 1)
    preserve: tuple = (2, 3)
    eval_samples: int = 400

    def validate(self) -> "PipelineConfig":
        for name in ("r1", "r2", "alpha"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        for c, v in self.r2_per_concept:
            if not 0 < v <= 1:
                raise ConfigError(f"r2 for concept {c} must be in (0, 1], got {v}")
        start, end = self.window
        if not 1 <= start <= end <= self.timesteps:
            raise ConfigError(f"window [{start}, {end}] not within [1, {self.timesteps}]")
        if set(self.forget) & set(self.preserve):
            raise ConfigError("forget and preserve concepts overlap")
        if not self.forget:
            raise ConfigError("no concepts to forget")
        n = len(self.modes)
        for c in (*self.forget, *self.preserve, *(c for c, _ in self.r2_per_concept)):
            if not 0 <= c < n:
                raise ConfigError(f"concept {c} out of range for {n} modes")
        if not self.target_layers:
            raise ConfigError("no target layers")
        for layer in self.target_layers:
            if layer not in td.TARGET_LAYERS:
                raise ConfigError(f"unknown target layer {layer!r}; choose from {', '.join(td.TARGET_LAYERS)}")
        if self.prompts_per_group < 2:
            raise ConfigError("prompts_per_group must be at least 2")
        if self.eval_samples < 1 or self.points_per_prompt < 1:
            raise ConfigError("sample counts must be positive")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        try:
            self.data_spec()
            self.train_config()
            td.linear_schedule(self.timesteps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def r2_for(self, concept: int) -> float:
        return dict(self.r2_per_concept).get(concept, self.r2)

    def data_spec(self) -> td.ToyDataSpec:
        return td.ToyDataSpec(self.modes, self.mode_std, self.samples_per_concept)

    def train_config(self) -> td.TrainConfig:
        cfg = td.TrainConfig(
            self.steps,
            self.learning_rate,
            self.momentum,
            self.batch_size,
            self.cond_drop,
            self.embed_l1,
            self.embed_scale,
            seed=self.train_seed,
        )
        if cfg.learning_rate <= 0 or cfg.steps < 0 or cfg.batch_size < 1:
            raise ValueError("invalid training settings")
        return cfg

    def to_ini(self) -> str:
        """Canonical text form; also the input of the config hash."""
        f = _fmt_frac
        sections = {
            "data": {
                "modes": "; ".join(",".join(repr(v) for v in m) for m in self.modes),
                "mode_std": repr(self.mode_std),
                "samples_per_concept": str(self.samples_per_concept),
            },
            "model": {"hidden": str(self.hidden), "timesteps": str(self.timesteps)},
            "train": {
                "steps": str(self.steps),
                "learning_rate": repr(self.learning_rate),
                "momentum": repr(self.momentum),
                "batch_size": str(self.batch_size),
                "cond_drop": repr(self.cond_drop),
                "embed_l1": repr(self.embed_l1),
                "embed_scale": repr(self.embed_scale),
            },
            "seeds": {
                "data": str(self.data_seed),
                "train": str(self.train_seed),
                "trace": str(self.trace_seed),
                "eval": str(self.eval_seed),
            },
            "trace": {"prompts_per_group": str(self.prompts_per_group), "points_per_prompt": str(self.points_per_prompt)},
            "saliency": {
                "target_layers": ", ".join(self.target_layers),
                "window": f"{self.window[0]}, {self.window[1]}",
                "std_mode": self.std_mode.value,
                "epsilon": repr(self.epsilon),
            },
            "sensitivity": {"r1": f(self.r1)},
            "select": {
                "r2": f(self.r2),
                "r2_per_concept": ", ".join(f"{c}: {f(v)}" for c, v in self.r2_per_concept),
                "granularity": self.granularity.value,
            },
            "fuse": {"alpha": f(self.alpha)},
            "eval": {
                "forget": ", ".join(map(str, self.forget)),
                "preserve": ", ".join(map(str, self.preserve)),
                "samples": str(self.eval_samples),
            },
        }
        lines = []
        for name, body in sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}".rstrip() for k, v in body.items())
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _fmt_frac(v: float) -> str:
    return repr(float(v))


def default_config_text() -> str:
    return resources.files("neuroforget").joinpath("default_config.ini").read_text()


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    base = PipelineConfig()
    values: dict = {}

    def get(section, key, conv, field_name=None):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                values[field_name or key] = conv(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None

    get("data", "modes", _parse_modes)
    get("data", "mode_std", float)
    get("data", "samples_per_concept", int)
    get("model", "hidden", int)
    get("model", "timesteps", int)
    for key, conv in (("steps", int), ("learning_rate", float), ("momentum", float), ("batch_size", int),
                      ("cond_drop", parse_fraction), ("embed_l1", float), ("embed_scale", float)):
        get("train", key, conv)
    for key in ("data", "train", "trace", "eval"):
        get("seeds", key, int, f"{key}_seed")
    get("trace", "prompts_per_group", int)
    get("trace", "points_per_prompt", int)
    get("saliency", "target_layers", lambda s: tuple(v.strip().lower() for v in s.split(",") if v.strip()))
    get("saliency", "window", parse_window)
    get("saliency", "std_mode", StdMode)
    get("saliency", "epsilon", float)
    get("sensitivity", "r1", parse_fraction)
    get("select", "r2", parse_fraction)
    get("select", "r2_per_concept", _parse_r2_map)
    get("select", "granularity", lambda s: Granularity(s.strip().lower()))
    get("fuse", "alpha", parse_fraction)
    get("eval", "forget", _ints)
    get("eval", "preserve", _ints)
    get("eval", "samples", int, "eval_samples")
    return dataclasses.replace(base, **values)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a config file (the bundled default when ``path`` is None) and apply overrides."""
    if path is None:
        text = default_config_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    seed = overrides.pop("seed", None)
    if seed is not None:
        overrides.update(data_seed=seed, train_seed=seed, trace_seed=seed + 1, eval_seed=seed + 100)
    return dataclasses.replace(cfg, **overrides).validate()


# -- in-memory pipeline -----------------------------------------------------


def train_model(cfg: PipelineConfig) -> tuple[td.ToyDiffusionModel, list[float]]:
    spec = cfg.data_spec()
    model = td.init_model(spec.concept_count, cfg.timesteps, cfg.hidden, seed=cfg.train_seed)
    return td.train(model, td.make_dataset(spec, cfg.data_seed), td.linear_schedule(cfg.timesteps), cfg.train_config())


def trace_model(cfg: PipelineConfig, model: td.ToyDiffusionModel):
    return td.export_trace(
        model,
        td.linear_schedule(cfg.timesteps),
        cfg.forget,
        cfg.prompts_per_group,
        cfg.points_per_prompt,
        cfg.target_layers,
        seed=cfg.trace_seed,
    )


def compute_saliencies(cfg: PipelineConfig, trace, workers: int = 1) -> list[ContrastiveSaliency]:
    jobs = [(layer, c) for layer in cfg.target_layers for c in cfg.forget]

    def one(job):
        layer, c = job
        return saliency_for_concept(
            trace, layer, td.concept_group_id(c), td.BASE_GROUP, cfg.window, cfg.epsilon, cfg.std_mode
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def compute_sensitivities(cfg: PipelineConfig, saliencies: Sequence[ContrastiveSaliency]) -> list[SensitivityMap]:
    return [sensitivity(s, cfg.r1) for s in saliencies]


def select_sets(cfg: PipelineConfig, maps: Sequence[SensitivityMap]) -> list[NeuronSet]:
    return [select_neurons(m, SelectionConfig(cfg.r2_for(int(m.concept_id)), cfg.granularity)) for m in maps]


def build_masks(sets: Sequence[NeuronSet]) -> list[ConceptMask]:
    return [build_mask(s, s.c_out, s.c_in) for s in sets]


def fuse_by_layer(masks: Sequence[ConceptMask], alpha: float) -> list[FusedMaskPlan]:
    by_layer: dict[str, list[ConceptMask]] = {}
    for m in masks:
        by_layer.setdefault(m.layer_id, []).append(m)
    return [plan_for_masks(ms, alpha) for ms in by_layer.values()]


def prune(model: td.ToyDiffusionModel, plans: Sequence[FusedMaskPlan]) -> td.ToyDiffusionModel:
    for plan in plans:
        model = model.with_layer_weights(plan.layer_id, apply_plan(model.layer_weights(plan.layer_id), plan))
    return model


def evaluate_models(cfg: PipelineConfig, model, pruned, plans: Sequence[FusedMaskPlan]) -> tuple[RunReport, dict]:
    """Paired pre/post sampling per concept; returns the report and the sample clouds."""
    schedule = td.linear_schedule(cfg.timesteps)
    modes = np.array(cfg.modes)
    acc_pre, acc_post, clouds = {}, {}, {}
    for c in (*cfg.forget, *cfg.preserve):
        seed = np.random.SeedSequence([cfg.eval_seed, c])
        pre = td.sample(model, schedule, c, cfg.eval_samples, seed)
        post = td.sample(pruned, schedule, c, cfg.eval_samples, seed)
        acc_pre[str(c)] = assignment_accuracy(pre, c, modes)
        acc_post[str(c)] = assignment_accuracy(post, c, modes)
        clouds[c] = (pre, post)
    report = RunReport(
        acc_pre,
        acc_post,
        [str(c) for c in cfg.forget],
        [str(c) for c in cfg.preserve],
        {p.layer_id: len(p.prune_set - p.agnostic_set) / (p.c_out * p.c_in) for p in plans},
    )
    return report, clouds


# -- stages (file based) ----------------------------------------------------


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing input {path}")
    return path


def _mask_name(mask: ConceptMask) -> str:
    return f"{mask.layer_id}__concept{mask.concept_id}.json"


def stage_trace(cfg: PipelineConfig, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    model, curve = train_model(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    td.save_checkpoint(model, out_dir / MODEL_FILE)
    td.write_loss_csv(curve, out_dir / LOSS_FILE)
    write_trace(trace_model(cfg, model), out_dir / TRACE_FILE)
    return [out_dir / MODEL_FILE, out_dir / LOSS_FILE, out_dir / TRACE_FILE]


def stage_saliency(cfg, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    trace = read_trace(_need(in_dir / TRACE_FILE, "saliency"))
    sals = compute_saliencies(cfg, trace, workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_saliency_csv(sals, out_dir / SALIENCY_FILE)
    return [out_dir / SALIENCY_FILE]


def stage_sensitivity(cfg, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    sals = read_saliency_csv(_need(in_dir / SALIENCY_FILE, "sensitivity"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_sensitivity_csv(compute_sensitivities(cfg, sals), out_dir / SENSITIVITY_FILE)
    return [out_dir / SENSITIVITY_FILE]


def stage_select(cfg, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    maps = read_sensitivity_csv(_need(in_dir / SENSITIVITY_FILE, "select"))
    mask_dir = out_dir / MASK_DIR
    mask_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for mask in build_masks(select_sets(cfg, maps)):
        path = mask_dir / _mask_name(mask)
        path.write_text(mask.to_json())
        written.append(path)
    return written


def stage_fuse(cfg, in_dir: Path, out_dir: Path, workers: int = 1, mask_files: Sequence[Path] | None = None) -> list[Path]:
    if mask_files:
        files = [_need(Path(p), "fuse") for p in mask_files]
    else:
        files = sorted(_need(in_dir / MASK_DIR, "fuse").glob("*.json"))
    if not files:
        raise StageError("fuse", "no mask files")
    masks = [ConceptMask.from_json(p.read_text()) for p in files]
    plan_dir = out_dir / PLAN_DIR
    plan_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for plan in fuse_by_layer(masks, cfg.alpha):
        path = plan_dir / f"{plan.layer_id}.json"
        path.write_text(plan.to_json())
        written.append(path)
    return written


def _read_plans(in_dir: Path, stage: str) -> list[FusedMaskPlan]:
    files = sorted(_need(in_dir / PLAN_DIR, stage).glob("*.json"))
    if not files:
        raise StageError(stage, "no plan files")
    return [FusedMaskPlan.from_json(p.read_text()) for p in files]


def stage_apply(cfg, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    model = td.load_checkpoint(_need(in_dir / MODEL_FILE, "apply"))
    pruned = prune(model, _read_plans(in_dir, "apply"))
    out_dir.mkdir(parents=True, exist_ok=True)
    td.save_checkpoint(pruned, out_dir / PRUNED_FILE)
    return [out_dir / PRUNED_FILE]


def stage_eval(cfg, in_dir: Path, out_dir: Path, workers: int = 1) -> list[Path]:
    model = td.load_checkpoint(_need(in_dir / MODEL_FILE, "eval"))
    pruned = td.load_checkpoint(_need(in_dir / PRUNED_FILE, "eval"))
    plans = _read_plans(in_dir, "eval")
    report, clouds = evaluate_models(cfg, model, pruned, plans)
    summary = summarize(report, {p.layer_id: p.c_out * p.c_in for p in plans})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / REPORT_FILE).write_text(report.to_json())
    (out_dir / CONCEPT_CSV).write_text(summary.concept_csv())
    (out_dir / AGGREGATE_CSV).write_text(summary.aggregate_csv())
    td.write_samples_csv(
        {f"concept{c}/{tag}": pts for c, pair in clouds.items() for tag, pts in zip(("pre", "post"), pair)},
        out_dir / SAMPLES_FILE,
    )
    written = [out_dir / n for n in (REPORT_FILE, CONCEPT_CSV, AGGREGATE_CSV, SAMPLES_FILE)]
    for c, (pre, post) in clouds.items():
        role = "forget" if c in cfg.forget else "preserve"
        path = out_dir / f"scatter_concept{c}.svg"
        path.write_text(scatter_svg({"pre-prune": pre, "post-prune": post}, cfg.modes, f"concept {c} ({role})"))
        written.append(path)
    print(_summary_line(summary))
    return written


def _summary_line(summary) -> str:
    parts = []
    if summary.forget_acc is not None:
        parts.append(f"F={summary.forget_acc * 100:.1f}")
    if summary.preserve_acc is not None:
        parts.append(f"P={summary.preserve_acc * 100:.1f}")
    if summary.overall is not None:
        parts.append(f"overall={summary.overall:.1f}")
    if summary.pruned_fraction_total is not None:
        parts.append(f"pruned={summary.pruned_fraction_total * 100:.3f}%")
    return " ".join(parts)


def eval_report_file(path) -> str:
    """Summarize an existing report JSON; returns the printed summary line."""
    try:
        report = RunReport.from_json(Path(path).read_text())
    except OSError as exc:
        raise StageError("eval", f"cannot read report {path}: {exc}") from None
    return _summary_line(summarize(report))


STAGE_FUNCS = {
    "trace": stage_trace,
    "saliency": stage_saliency,
    "sensitivity": stage_sensitivity,
    "select": stage_select,
    "fuse": stage_fuse,
    "apply": stage_apply,
    "eval": stage_eval,
}


def run_stage(name: str, cfg: PipelineConfig, in_dir, out_dir, workers: int = 1, **kwargs) -> list[Path]:
    """Run one stage, converting any failure into a :class:`StageError` naming it."""
    try:
        return STAGE_FUNCS[name](cfg, Path(in_dir), Path(out_dir), workers, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg: PipelineConfig, run_dir, workers: int = 1) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(cfg.to_ini())
    for name in STAGES:
        run_stage(name, cfg, run_dir, run_dir, workers)
    return run_dir


def new_run_dir(cfg: PipelineConfig, base) -> Path:
    return Path(base) / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.digest()[:12]}"


# -- sweeps -----------------------------------------------------------------

SWEEP_COLUMNS = ("param", "value", "r2", "selected_count", "agnostic_count", "prune_count", "F", "P", "overall")


def _plans_for(cfg: PipelineConfig, maps) -> tuple[list[NeuronSet], list[FusedMaskPlan]]:
    sets = select_sets(cfg, maps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plans = fuse_by_layer(build_masks(sets), cfg.alpha)
    return sets, plans


def _prune_count(plans) -> int:
    return sum(len(p.prune_set - p.agnostic_set) for p in plans)


def match_budget_r2(cfg: PipelineConfig, maps, budget: int) -> float:
    """The smallest r2 whose pruned-cell count reaches ``budget``.

    Candidates are the r2 values at which the per-channel or the layer-wide
    candidate size changes. Counts are not monotone in r2 once cells start
    turning concept-agnostic, so the scan stops at the first hit; if no
    candidate reaches the budget the closest count wins.
    """
    c_out, c_in = maps[0].shape
    cells = c_out * c_in
    candidates = sorted({k / c_in for k in range(1, c_in + 1)} | {k / cells for k in range(1, cells + 1)})
    best = None
    for r2 in candidates:
        trial = dataclasses.replace(cfg, r2=r2, r2_per_concept=())
        count = _prune_count(_plans_for(trial, maps)[1])
        if count >= budget:
            return r2
        if best is None or budget - count < best[0]:
            best = (budget - count, r2)
    return best[1]


def parse_sweep_values(param: str, values: Sequence[str]) -> list:
    if not values:
        raise ConfigError("empty sweep list")
    if param == "granularity":
        try:
            return [Granularity(v.strip().lower()) for v in values]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if param == "r2":
        return [parse_percent(v) for v in values]
    return [parse_fraction(v) for v in values]


def run_sweep(
    cfg: PipelineConfig, param: str, values: Sequence, out_dir, workers: int = 1, match_budget: bool = False
) -> Path:
    """One pipeline run per swept value on a shared trace; writes sweep.csv.

    With ``match_budget`` (granularity sweeps), every strategy gets the r2
    whose pruned-cell count is closest to that of BOTH at the configured r2.
    """
    if param not in ("alpha", "r2", "granularity"):
        raise ConfigError(f"cannot sweep {param!r}; choose alpha, r2 or granularity")
    if not values:
        raise ConfigError("empty sweep list")
    trials = []
    for v in values:
        trial = dataclasses.replace(cfg, **{param: v})
        if param == "r2":
            trial = dataclasses.replace(trial, r2_per_concept=())
        trials.append(trial.validate())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        model, _ = train_model(cfg)
        trace = trace_model(cfg, model)
        maps = compute_sensitivities(cfg, compute_saliencies(cfg, trace, workers))
    except Exception as exc:
        raise StageError("sweep", f"{type(exc).__name__}: {exc}") from exc

    budget = None
    if match_budget:
        budget = _prune_count(_plans_for(dataclasses.replace(cfg, granularity=Granularity.BOTH), maps)[1])
    rows, per_set_sizes = [], []
    for value, trial in zip(values, trials):
        if budget is not None and trial.granularity is not Granularity.BOTH:
            trial = dataclasses.replace(trial, r2=match_budget_r2(trial, maps, budget), r2_per_concept=())
        sets, plans = _plans_for(trial, maps)
        report, _ = evaluate_models(trial, model, prune(model, plans), plans)
        summary = summarize(report)
        rows.append(
            {
                "param": param,
                "value": value.value if isinstance(value, Granularity) else repr(float(value)),
                "r2": repr(trial.r2),
                "selected_count": sum(len(s) for s in sets),
                "agnostic_count": sum(len(p.agnostic_set) for p in plans),
                "prune_count": _prune_count(plans),
                "F": _opt(summary.forget_acc),
                "P": _opt(summary.preserve_acc),
                "overall": _opt(summary.overall),
            }
        )
        per_set_sizes.append([len(s) for s in sets])

    path = out_dir / "sweep.csv"
    lines = [",".join(SWEEP_COLUMNS)] + [",".join(str(r[c]) for c in SWEEP_COLUMNS) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    _check_monotone(param, values, rows, per_set_sizes)
    return path


def _opt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _check_monotone(param, values, rows, per_set_sizes) -> None:
    if param == "granularity":
        return
    order = np.argsort(np.asarray(values, dtype=np.float64), kind="stable")
    if param == "alpha":
        counts = [rows[k]["agnostic_count"] for k in order]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise StageError("sweep", f"agnostic count increases with alpha: {counts}")
    else:
        sizes = np.array([per_set_sizes[k] for k in order])
        if np.any(np.diff(sizes, axis=0) < 0):
            raise StageError("sweep", "selected set shrinks as r2 grows")


# -- argument parsing -------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config file (default: the bundled config)")
    p.add_argument("--out-dir", help="artifact directory")
    p.add_argument("--in-dir", help="input artifact directory for single stages (default: --out-dir)")
    p.add_argument("--seed", type=int, help="master seed; overrides the [seeds] section")
    p.add_argument("--workers", type=int, default=1, help="worker threads for per-concept work")
    p.add_argument("--granularity", choices=[g.value for g in Granularity])
    p.add_argument("--alpha", help="concept-agnostic ratio, fraction or percent")
    p.add_argument("--r1", help="temporal sparsity in percent (5 means 5%%)")
    p.add_argument("--r2", help="spatial sparsity in percent (1 means 1%%)")
    p.add_argument("--window", help="inclusive timestep window 'start,end'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroforget", description="Concept-neuron pruning pipeline on a toy diffusion testbed.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run every stage into a fresh timestamped directory")
    _add_common(p)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _add_common(p)
        if name == "fuse":
            p.add_argument("--masks", nargs="+", help="explicit mask JSON files")
        if name == "eval":
            p.add_argument("--report", help="summarize an existing report JSON instead")
    p = sub.add_parser("sweep", help="sweep alpha, r2 or granularity on a shared trace")
    _add_common(p)
    p.add_argument("--param", required=True, choices=("alpha", "r2", "granularity"))
    p.add_argument("--values", required=True, help="comma-separated values (r2 in percent)")
    p.add_argument("--match-budget", action="store_true", help="granularity sweep at matched pruned-cell budget")
    return parser


def _config_from_args(args) -> PipelineConfig:
    overrides = {"seed": args.seed}
    if args.granularity:
        overrides["granularity"] = Granularity(args.granularity)
    if args.alpha is not None:
        overrides["alpha"] = parse_fraction(args.alpha)
    # sparsities on the command line are percentages, as in the hyperparameter tables
    for name in ("r1", "r2"):
        if getattr(args, name) is not None:
            overrides[name] = parse_percent(getattr(args, name))
    if args.window:
        overrides["window"] = parse_window(args.window)
    return load_config(args.config, **overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval" and args.report:
            print(eval_report_file(args.report))
            return 0
        cfg = _config_from_args(args)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.command == "run":
            run_dir = run_pipeline(cfg, new_run_dir(cfg, args.out_dir or "runs"), args.workers)
            print(run_dir)
        elif args.command == "sweep":
            values = parse_sweep_values(args.param, [v for v in args.values.split(",") if v.strip()])
            print(run_sweep(cfg, args.param, values, args.out_dir or ".", args.workers, args.match_budget))
        else:
            out_dir = Path(args.out_dir or ".")
            in_dir = Path(args.in_dir) if args.in_dir else out_dir
            extra = {"mask_files": args.masks} if args.command == "fuse" and args.masks else {}
            for path in run_stage(args.command, cfg, in_dir, out_dir, args.workers, **extra):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
