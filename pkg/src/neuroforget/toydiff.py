"""A small conditional denoising-diffusion testbed on 2-D Gaussian concepts.

The denoiser is a numpy MLP predicting the added noise::

    h0 = relu(W_in x + b_in + temb(t))             # input embedding
    g  = relu(W_ffn1 h0 + b_ffn1 + e_c)            # FFN1
    h  = relu(W_ffn2 g + b_ffn2)                   # FFN2
    eps_hat = W_out h + b_out

``e_c`` is a learned condition vector; index C is the null (base)
condition and is fixed at zero, so each concept vector is an offset from
the unconditional model. FFN1 and FFN2 are the pruning targets; their
recorded activations are their exact inputs (h0 and g).

Timesteps of recorded traces count denoising steps: step 1 is the first
(noisiest) step of ancestral sampling, step T the last.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .trace import ActivationTrace, GroupKind, LayerSpec, PromptGroup, TargetKind

FFN1 = "ffn1"
FFN2 = "ffn2"
TARGET_LAYERS = {FFN1: TargetKind.FFN1, FFN2: TargetKind.FFN2}

CHECKPOINT_MAGIC = b"FIAM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDataSpec:
    modes: tuple  # C points in R^2
    mode_std: float = 0.3
    samples_per_concept: int = 1000

    def __post_init__(self):
        modes = tuple(tuple(float(v) for v in m) for m in self.modes)
        object.__setattr__(self, "modes", modes)
        if len(modes) < 2:
            raise ValueError("need at least two concepts")
        if any(len(m) != 2 for m in modes):
            raise ValueError("modes must be points in R^2")
        if self.mode_std <= 0:
            raise ValueError("mode_std must be positive")
        if self.samples_per_concept < 0:
            raise ValueError("samples_per_concept must be >= 0")
        arr = np.array(modes)
        d = np.sqrt(((arr[:, None] - arr[None]) ** 2).sum(-1))
        if np.min(d[~np.eye(len(modes), dtype=bool)]) < 6 * self.mode_std:
            raise ValueError("modes must be at least 6 * mode_std apart")

    @property
    def concept_count(self) -> int:
        return len(self.modes)

    @property
    def mode_array(self) -> np.ndarray:
        return np.array(self.modes)


def default_data_spec() -> ToyDataSpec:
    return ToyDataSpec(modes=((3, 3), (-3, 3), (-3, -3), (3, -3)), mode_std=0.3, samples_per_concept=1000)


def make_dataset(spec: ToyDataSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Points (n, 2) and concept labels (n,), concept blocks in order."""
    rng = np.random.default_rng(seed)
    n = spec.samples_per_concept
    labels = np.repeat(np.arange(spec.concept_count), n)
    points = spec.mode_array[labels] + spec.mode_std * rng.standard_normal((labels.size, 2))
    return points, labels


# -- schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.beta)


def linear_schedule(T: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas; defaults rescale the usual 1e-4..0.02 (for 1000 steps) to T steps.

    For very short chains (T < 21) the rescaled end point is capped at 0.999.
    """
    scale = 1000.0 / T
    beta_end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
    beta_start = min(1e-4 * scale, beta_end / 2) if beta_start is None else beta_start
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def noise_data(x0: np.ndarray, t_index: np.ndarray, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Forward process sample x_t; ``t_index`` is 0-based (0 -> t = 1)."""
    ab = schedule.alpha_bar[t_index][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# -- model ------------------------------------------------------------------


@dataclass
class Plant:
    concept: int
    layer: str
    cells: frozenset
    gain: float


@dataclass
class ToyDiffusionModel:
    """Parameters plus the bookkeeping needed to run the denoiser.

    ``params["embed"]`` holds C + 1 condition vectors of width H; the last
    one is the null (base) condition and stays at zero.
    """

    params: dict[str, np.ndarray]
    concept_count: int
    T: int
    plants: list[Plant] = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.params["w_ffn1"].shape[0]

    @property
    def null_condition(self) -> int:
        return self.concept_count

    def copy(self) -> "ToyDiffusionModel":
        return ToyDiffusionModel({k: v.copy() for k, v in self.params.items()}, self.concept_count, self.T, list(self.plants))

    def layer_weights(self, layer: str) -> np.ndarray:
        if layer not in TARGET_LAYERS:
            raise KeyError(f"layer {layer!r} is not a registered target ({', '.join(TARGET_LAYERS)})")
        return self.params[f"w_{layer}"]

    def with_layer_weights(self, layer: str, weights: np.ndarray) -> "ToyDiffusionModel":
        m = self.copy()
        old = m.layer_weights(layer)
        if weights.shape != old.shape:
            raise ValueError(f"weights {weights.shape} do not match layer {layer} {old.shape}")
        m.params[f"w_{layer}"] = np.asarray(weights, dtype=np.float64).copy()
        return m

    def layer_specs(self) -> list[LayerSpec]:
        h = self.hidden
        return [LayerSpec(FFN1, h, h, TargetKind.FFN1), LayerSpec(FFN2, h, h, TargetKind.FFN2)]

    def _boost(self, layer: str, acts: np.ndarray, cond: np.ndarray) -> np.ndarray:
        for plant in self.plants:
            if plant.layer != layer or plant.gain == 0:
                continue
            rows = cond == plant.concept
            if not np.any(rows):
                continue
            cols = sorted({j for _, j in plant.cells})
            acts = acts.copy()
            acts[np.ix_(rows, cols)] += plant.gain
        return acts

    def forward(self, x, t_index, cond, keep: bool = False):
        """Predict noise for points ``x`` (n, 2) at 0-based diffusion index ``t_index``.

        Returns the prediction, plus the activation cache when ``keep``.
        """
        p = self.params
        n = x.shape[0]
        t_index = np.broadcast_to(np.asarray(t_index), (n,))
        cond = np.broadcast_to(np.asarray(cond), (n,))
        z0 = x @ p["w_in"].T + p["b_in"] + timestep_embedding(t_index, self.T, self.hidden)
        h0 = self._boost(FFN1, np.maximum(z0, 0.0), cond)
        z1 = h0 @ p["w_ffn1"].T + p["b_ffn1"] + p["embed"][cond]
        g = self._boost(FFN2, np.maximum(z1, 0.0), cond)
        z2 = g @ p["w_ffn2"].T + p["b_ffn2"]
        h = np.maximum(z2, 0.0)
        out = h @ p["w_out"].T + p["b_out"]
        if keep:
            return out, {"x": x, "z0": z0, "h0": h0, "z1": z1, "g": g, "z2": z2, "h": h, "cond": cond}
        return out


def timestep_embedding(t_index: np.ndarray, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the 0-based diffusion index."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    angles = (np.asarray(t_index, dtype=np.float64) / T * 1000.0)[:, None] * freqs[None] / 10.0
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


def init_model(concept_count: int, T: int = 50, hidden: int = 64, seed: int = 0) -> ToyDiffusionModel:
    rng = np.random.default_rng(seed)

    def dense(fan_out, fan_in):
        return rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)

    params = {
        "embed": np.zeros((concept_count + 1, hidden)),
        "w_in": dense(hidden, 2),
        "b_in": np.zeros(hidden),
        "w_ffn1": dense(hidden, hidden),
        "b_ffn1": np.zeros(hidden),
        "w_ffn2": dense(hidden, hidden),
        "b_ffn2": np.zeros(hidden),
        "w_out": dense(2, hidden) * 0.5,
        "b_out": np.zeros(2),
    }
    return ToyDiffusionModel(params, concept_count, T)


def _gradients(model: ToyDiffusionModel, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {"w_out": d_out.T @ cache["h"], "b_out": d_out.sum(0)}
    dz2 = (d_out @ p["w_out"]) * (cache["z2"] > 0)
    grads["w_ffn2"] = dz2.T @ cache["g"]
    grads["b_ffn2"] = dz2.sum(0)
    dz1 = (dz2 @ p["w_ffn2"]) * (cache["z1"] > 0)
    grads["w_ffn1"] = dz1.T @ cache["h0"]
    grads["b_ffn1"] = dz1.sum(0)
    d_embed = np.zeros_like(p["embed"])
    np.add.at(d_embed, cache["cond"], dz1)
    d_embed[model.null_condition] = 0.0
    grads["embed"] = d_embed
    dz0 = (dz1 @ p["w_ffn1"]) * (cache["z0"] > 0)
    grads["w_in"] = dz0.T @ cache["x"]
    grads["b_in"] = dz0.sum(0)
    return grads


def loss_and_grads(model, x0, labels, t_index, noise, schedule):
    """Mean squared noise-prediction error and its gradients."""
    xt = noise_data(x0, t_index, schedule, noise)
    pred, cache = model.forward(xt, t_index, labels, keep=True)
    diff = pred - noise
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    d_out = 2.0 * diff / x0.shape[0]
    return loss, _gradients(model, cache, d_out)


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.

    Condition vectors are optimised in units of ``1 / embed_scale`` (a
    larger effective step) under an L1 penalty ``embed_l1``, which keeps
    each concept's offset from the base condition on a few hidden units.
    """

    steps: int = 2000
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 256
    cond_drop: float = 0.2
    embed_l1: float = 0.004
    embed_scale: float = 3.0
    grad_clip: float = 5.0
    seed: int = 0


def train(
    model: ToyDiffusionModel,
    dataset: tuple[np.ndarray, np.ndarray],
    schedule: NoiseSchedule,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[ToyDiffusionModel, list[float]]:
    """SGD with momentum on the noise-prediction loss; returns a trained copy and per-step losses.

    A fraction ``cond_drop`` of each batch is relabelled with the null
    condition so that the base condition learns the unconditional model.
    Trained parameters are rounded to float32 so checkpoints are exact.
    """
    if cfg.steps < 0:
        raise ValueError("steps must be >= 0")
    if cfg.learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if cfg.embed_scale <= 0 or cfg.embed_l1 < 0:
        raise ValueError("embed_scale must be positive and embed_l1 non-negative")
    model = model.copy()
    curve: list[float] = []
    if cfg.steps == 0:
        return model, curve
    points, labels = dataset
    if points.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    # the condition table is optimised as embed / embed_scale
    state = dict(model.params)
    state["embed"] = model.params["embed"] / cfg.embed_scale
    velocity = {k: np.zeros_like(v) for k, v in state.items()}
    order = rng.permutation(points.shape[0])
    cursor = 0
    for _ in range(cfg.steps):
        if cursor + cfg.batch_size > order.size:
            order = rng.permutation(points.shape[0])
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x0 = points[idx]
        cond = labels[idx].copy()
        cond[rng.random(idx.size) < cfg.cond_drop] = model.null_condition
        t_index = rng.integers(0, schedule.T, idx.size)
        noise = rng.standard_normal(x0.shape)
        loss, grads = loss_and_grads(model, x0, cond, t_index, noise, schedule)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {len(curve)}")
        curve.append(loss)
        grads["embed"] = cfg.embed_scale * grads["embed"] + cfg.embed_l1 * np.sign(state["embed"])
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g
            state[k] = state[k] + velocity[k]
            model.params[k] = state[k] * cfg.embed_scale if k == "embed" else state[k]
    model.params = {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()}
    return model, curve


# -- sampling and tracing ---------------------------------------------------


def _run_sampler(model, schedule, condition, count, rng, on_step=None) -> np.ndarray:
    x = rng.standard_normal((count, 2))
    beta, alpha, alpha_bar = schedule.beta, schedule.alpha, schedule.alpha_bar
    for step, t_index in enumerate(range(schedule.T - 1, -1, -1), start=1):
        if on_step is None:
            eps = model.forward(x, t_index, condition)
        else:
            eps, cache = model.forward(x, t_index, condition, keep=True)
            on_step(step, cache)
        x = (x - beta[t_index] / np.sqrt(1.0 - alpha_bar[t_index]) * eps) / np.sqrt(alpha[t_index])
        if t_index > 0:
            x = x + np.sqrt(beta[t_index]) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at denoising step {step}")
    return x


def _condition_index(model: ToyDiffusionModel, condition) -> int:
    if condition is None or condition == "base":
        return model.null_condition
    c = int(condition)
    if not 0 <= c < model.concept_count:
        raise ValueError(f"condition {condition!r} out of range")
    return c


def sample(model: ToyDiffusionModel, schedule: NoiseSchedule, condition, count: int, seed) -> np.ndarray:
    """Ancestral sampling; ``condition`` is a concept index or "base"."""
    cond = _condition_index(model, condition)
    if count == 0:
        return np.empty((0, 2))
    rng = np.random.default_rng(seed)
    return _run_sampler(model, schedule, cond, count, rng)


def prompt_seed(seed: int, group_index: int, prompt_index: int) -> np.random.SeedSequence:
    """Independent random stream per (seed, group, prompt)."""
    return np.random.SeedSequence([seed, group_index, prompt_index])


def concept_group_id(concept: int) -> str:
    return f"concept{concept}"


BASE_GROUP = "base"


def export_trace(
    model: ToyDiffusionModel,
    schedule: NoiseSchedule,
    concepts: Iterable[int],
    prompts_per_group: int = 5,
    points_per_prompt: int = 32,
    layers: Iterable[str] = (FFN2,),
    seed: int = 0,
) -> ActivationTrace:
    """Record target-layer inputs at every denoising step of per-prompt sampling runs.

    One CONCEPT group per concept (its embedding) and one BASE group (the
    null embedding); each prompt is an independent sampling run of
    ``points_per_prompt`` points.
    """
    layers = list(layers)
    for layer in layers:
        model.layer_weights(layer)
    if prompts_per_group < 2:
        raise ValueError("need at least two prompts per group")
    concepts = [_condition_index(model, c) for c in concepts]
    groups = [PromptGroup(concept_group_id(c), GroupKind.CONCEPT, prompts_per_group, str(c)) for c in concepts]
    groups.append(PromptGroup(BASE_GROUP, GroupKind.BASE, prompts_per_group))
    conditions = concepts + [model.null_condition]

    specs = {s.layer_id: s for s in model.layer_specs()}
    cache_key = {FFN1: "h0", FFN2: "g"}
    records = {}
    for gi, (group, cond) in enumerate(zip(groups, conditions)):
        for p in range(prompts_per_group):
            rng = np.random.default_rng(prompt_seed(seed, gi, p))

            def on_step(step, cache, group_id=group.group_id, p=p):
                for layer in layers:
                    records[(layer, step, group_id, p)] = cache[cache_key[layer]].astype(np.float32)

            _run_sampler(model, schedule, cond, points_per_prompt, rng, on_step)
    return ActivationTrace(
        [specs[l] for l in layers],
        {l: model.layer_weights(l).astype(np.float32) for l in layers},
        groups,
        schedule.T,
        records,
    )


def typical_activation(model: ToyDiffusionModel, schedule: NoiseSchedule, layer: str, seed: int = 0, count: int = 64) -> float:
    """Root-mean-square entry of a target layer's input under base sampling."""
    model.layer_weights(layer)
    key = {FFN1: "h0", FFN2: "g"}[layer]
    acc = []
    _run_sampler(model, schedule, model.null_condition, count, np.random.default_rng(seed), lambda s, c: acc.append(c[key]))
    return float(np.sqrt(np.mean(np.square(acc))))


def plant_concept_neurons(
    model: ToyDiffusionModel, concept_id: int, target_layer: str, cells, gain: float, route_scale: float = 3.0
) -> ToyDiffusionModel:
    """Plant a concept-gated signal on designated connections of a target layer.

    When conditioned on ``concept_id`` the input channels of ``cells`` get
    ``+gain`` at every position. The designated connections are set to
    ``route_scale`` times the largest weight magnitude of the layer so the
    boost flows mainly through them. Other conditions see unchanged inputs.
    """
    w = model.layer_weights(target_layer)
    cells = frozenset((int(i), int(j)) for i, j in cells)
    for i, j in cells:
        if not (0 <= i < w.shape[0] and 0 <= j < w.shape[1]):
            raise IndexError(f"cell ({i}, {j}) outside {w.shape}")
    if gain < 0:
        raise ValueError("gain must be >= 0")
    if not 0 <= concept_id < model.concept_count:
        raise ValueError(f"concept {concept_id} out of range")
    out = model.copy()
    if gain == 0 or not cells:
        return out
    w = w.copy()
    peak = np.max(np.abs(w))
    for i, j in cells:
        w[i, j] = (1.0 if w[i, j] >= 0 else -1.0) * route_scale * peak
    out.params[f"w_{target_layer}"] = w
    out.plants = out.plants + [Plant(concept_id, target_layer, cells, float(gain))]
    return out


# -- checkpoints ------------------------------------------------------------

_HEADER_SIZE = 18
_PARAM_ORDER = ("embed", "w_in", "b_in", "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2", "w_out", "b_out")


def save_checkpoint(model: ToyDiffusionModel, path) -> None:
    """FIAM: magic, u16 version, u32 concept_count, T, hidden, then f32 tensors row-major."""
    if model.plants:
        raise ValueError("planted models are verification fixtures and are not checkpointed")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<III", model.concept_count, model.T, model.hidden),
    ]
    for name in _PARAM_ORDER:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ToyDiffusionModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if len(data) < _HEADER_SIZE:
        raise ValueError("truncated checkpoint")
    concepts, T, hidden = struct.unpack_from("<III", data, 6)
    shapes = {
        "embed": (concepts + 1, hidden),
        "w_in": (hidden, 2),
        "b_in": (hidden,),
        "w_ffn1": (hidden, hidden),
        "b_ffn1": (hidden,),
        "w_ffn2": (hidden, hidden),
        "b_ffn2": (hidden,),
        "w_out": (2, hidden),
        "b_out": (2,),
    }
    offset = _HEADER_SIZE
    params = {}
    for name in _PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        if offset + 4 * size > len(data):
            raise ValueError("truncated checkpoint")
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shapes[name]).astype(np.float64)
        offset += 4 * size
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ToyDiffusionModel(params, concepts, T)


# -- CSV outputs ------------------------------------------------------------


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "loss"])
        for step, loss in enumerate(curve, start=1):
            wr.writerow([step, repr(float(loss))])


def write_samples_csv(clouds: dict, path) -> None:
    """``clouds`` maps a label (e.g. "concept0/pre") to an (n, 2) array."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "x", "y"])
        for label, pts in clouds.items():
            for x, y in np.asarray(pts, dtype=np.float64).reshape(-1, 2):
                wr.writerow([label, repr(float(x)), repr(float(y))])
