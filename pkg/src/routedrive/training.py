"""Three-stage training schedule, composite losses and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import tokenizer as tk
from .errors import ContractError, TrainingError
from .flow import FlowNoise, TrajectoryOutput, euler_integrate, flow_terms, initial_noise
from .language import greedy_decode, language_loss
from .model import Batch, Model
from .numerics import Tensor
from .world import DrivingSample, batches, collate

log = logging.getLogger(__name__)

PAPER_EPOCHS = (10, 12, 7)
EULER_STEPS = 10


@dataclass(frozen=True)
class LossWeights:
    path: float = 1.0
    smooth: float = 0.1
    speed: float = 1.0


# groups (see model.GROUPS) held fixed in each stage, and the loss it optimizes
STAGE_FROZEN = {
    1: ("expert1", "flow_heads", "action_proj", "cond_proj"),
    2: ("expert0", "lm_head", "text_embed"),
    3: (),
}
STAGE_LOSSES = {1: ("lang",), 2: ("drive",), 3: ("lang", "drive")}


@dataclass
class TrainConfig:
    epochs: tuple[int, int, int] = PAPER_EPOCHS
    lr: float = 3e-4
    batch_size: int = 16
    grad_clip: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    shuffle_seed: int = 0
    freeze_attn_stage2: bool = False
    euler_steps: int = EULER_STEPS
    eval_seed: int = 0


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int
    lr: float
    frozen_groups: tuple[str, ...]
    losses: tuple[str, ...]


def stage_config(stage: int, train: TrainConfig) -> StageConfig:
    if stage not in STAGE_FROZEN:
        raise ContractError(f"unknown stage {stage}; expected 1, 2 or 3")
    frozen = STAGE_FROZEN[stage]
    if stage == 2 and train.freeze_attn_stage2:
        frozen = frozen + ("attention",)
    return StageConfig(stage, train.epochs[stage - 1], train.lr, frozen, STAGE_LOSSES[stage])


def frozen_names(model: Model, cfg: StageConfig) -> list[str]:
    names: list[str] = []
    for g in cfg.frozen_groups:
        names += [n for n in model.group(g) if n not in names]
    return names


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def combine_drive(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return nx.add(
        nx.add(nx.scale(terms["path"], weights.path), nx.scale(terms["smooth"], weights.smooth)),
        nx.scale(terms["speed"], weights.speed),
    )


def drive_loss(model: Model, batch: Batch, weights: LossWeights, noise: FlowNoise) -> Tensor:
    """lambda_path * L_path + lambda_smooth * L_smooth + lambda_speed * L_speed."""
    return combine_drive(flow_terms(model, batch, noise), weights)


def total_loss(model: Model, batch: Batch, weights: LossWeights, noise: FlowNoise) -> Tensor:
    """L_lang + L_drive, both read off one forward pass."""
    terms = flow_terms(model, batch, noise, with_language=True)
    return nx.add(terms["lang"], combine_drive(terms, weights))


def stage_loss(
    model: Model, batch: Batch, cfg: StageConfig, weights: LossWeights, rng: np.random.Generator
) -> tuple[Tensor, dict[str, float]]:
    if cfg.losses == ("lang",):
        loss = language_loss(model, batch)
        return loss, {"lang": float(loss.data)}
    noise = FlowNoise.draw(rng, len(batch))
    terms = flow_terms(model, batch, noise, with_language="lang" in cfg.losses)
    loss = combine_drive(terms, weights)
    if "lang" in cfg.losses:
        loss = nx.add(terms["lang"], loss)
    parts = {k: float(v.data) for k, v in terms.items()}
    return loss, parts


def _first_nan(model: Model, loss_parts: dict[str, float]) -> str | None:
    for k, v in loss_parts.items():
        if not math.isfinite(v):
            return f"loss term {k!r}"
    for name, t in model.store.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"gradient of {name!r}"
        if not np.all(np.isfinite(t.data)):
            return f"parameter {name!r}"
    return None


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def run_stage(
    cfg: StageConfig,
    model: Model,
    dataset: Sequence[DrivingSample],
    train: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Adam over shuffled minibatches with the stage's groups frozen.

    Returns one record per epoch with the mean of every loss term.
    """
    if not dataset:
        raise ContractError("run_stage needs a non-empty dataset")
    store = model.store
    frozen = set(frozen_names(model, cfg))
    for name in store.names():
        store.set_trainable([name], name not in frozen)
        store[name].requires_grad = name not in frozen
    store.reset_optimizer()
    rng = np.random.default_rng([train.shuffle_seed, cfg.stage])
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums: dict[str, float] = {}
            count = 0
            for batch in batches(dataset, train.batch_size, rng):
                store.zero_grad()
                loss, parts = stage_loss(model, batch, cfg, train.weights, rng)
                if not math.isfinite(float(loss.data)):
                    raise TrainingError(
                        f"stage {cfg.stage} epoch {epoch}: non-finite loss from {_first_nan(model, parts)}"
                    )
                nx.backward(loss)
                nx.clip_grad_norm(store, train.grad_clip)
                bad = _first_nan(model, parts)
                if bad:
                    raise TrainingError(f"stage {cfg.stage} epoch {epoch}: NaN in {bad}")
                nx.adam_step(store, cfg.lr)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(batch)
                count += len(batch)
            rec = {"stage": cfg.stage, "epoch": epoch, **{k: v / count for k, v in sums.items()}}
            history.append(rec)
            log.info("stage %d epoch %d %s", cfg.stage, epoch, rec)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        store.zero_grad()
        for name in store.names():
            store[name].requires_grad = True
            store.set_trainable([name], True)
    return history


def run_schedule(
    model: Model,
    dataset: Sequence[DrivingSample],
    train: TrainConfig,
    stages: Sequence[int] = (1, 2, 3),
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    history: list[dict] = []
    for stage in stages:
        history += run_stage(stage_config(stage, train), model, dataset, train, on_epoch)
    return history


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

METRICS = ("ade", "fde", "speed_mae", "accuracy")


@dataclass
class EvalReport:
    ade: float
    fde: float
    speed_mae: float
    accuracy: float
    count: int
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k}: {getattr(self, k):.6f}" for k in METRICS]
        lines.append(f"count: {self.count}")
        for cls in sorted(self.per_class):
            for k, v in self.per_class[cls].items():
                lines.append(f"{cls}.{k}: {v:.6f}" if k != "count" else f"{cls}.count: {int(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals: dict[str, str] = {}
        for line in text.splitlines():
            if ":" in line:
                k, v = line.split(":", 1)
                vals[k.strip()] = v.strip()
        per_class: dict[str, dict[str, float]] = {}
        for k, v in vals.items():
            if "." in k:
                c, m = k.split(".", 1)
                per_class.setdefault(c, {})[m] = float(v)
        return cls(
            *(float(vals[k]) for k in METRICS), int(vals["count"]), per_class
        )


PlanFn = Callable[[Batch], TrajectoryOutput]
DecodeFn = Callable[[Batch], list[list[int]]]


def pad_text(decoded: list[list[int]], n: int) -> np.ndarray:
    """Decoded symbols without EOS, padded/truncated to ``n`` per row."""
    out = np.full((len(decoded), n), tk.PAD, dtype=np.int64)
    for i, ids in enumerate(decoded):
        body = [t for t in ids if t != tk.EOS][:n]
        out[i, : len(body)] = body
    return out


def predict_batch(
    model: Model, batch: Batch, euler_steps: int, seed: int
) -> tuple[list[list[int]], TrajectoryOutput]:
    """Decode the instruction, then plan with the decoded symbols in context."""
    decoded = greedy_decode(model, batch, max_len=min(16, model.cfg.instruction_len + 1))
    k = batch.command_ids.shape[1] - 2
    planned = batch.with_text(pad_text(decoded, k))
    x0 = _per_sample_noise(seed, batch.index)
    traj = euler_integrate(model, planned, steps=euler_steps, x0=x0)
    return decoded, traj


def _per_sample_noise(seed: int, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Starting noise that depends only on (seed, dataset position)."""
    paths, speeds = [], []
    for i in index:
        p, s = initial_noise(np.random.SeedSequence([seed, int(i)]).generate_state(1)[0], 1)
        paths.append(p[0])
        speeds.append(s[0])
    return np.stack(paths), np.stack(speeds)


def evaluate(
    model: Model | None,
    dataset: Sequence[DrivingSample],
    euler_steps: int = EULER_STEPS,
    seed: int = 0,
    batch_size: int = 100,
    plan_fn: PlanFn | None = None,
    decode_fn: DecodeFn | None = None,
) -> EvalReport:
    """ADE/FDE over the 20 waypoints, speed MAE, and per-token instruction accuracy.

    ``plan_fn`` / ``decode_fn`` stand in for the model (tests use stubs).
    """
    if not dataset:
        raise ContractError("evaluate needs a non-empty dataset")
    n = len(dataset)
    disp = np.zeros((n, tk.N_WAYPOINTS))
    speed_err = np.zeros(n)
    correct = np.zeros(n)
    total = np.zeros(n)
    for batch in batches(dataset, batch_size):
        if plan_fn is None and decode_fn is None:
            decoded, traj = predict_batch(model, batch, euler_steps, seed)
        else:
            decoded = decode_fn(batch) if decode_fn else greedy_decode(model, batch)
            traj = plan_fn(batch) if plan_fn else predict_batch(model, batch, euler_steps, seed)[1]
        idx = batch.index
        disp[idx] = np.linalg.norm(traj.waypoints - batch.path, axis=-1)
        speed_err[idx] = np.abs(traj.speeds - batch.speed).mean(axis=-1)
        for row, i in enumerate(idx):
            target = [int(t) for t in batch.text_targets[row]]
            got = decoded[row]
            correct[i] = sum(1 for j, t in enumerate(target) if j < len(got) and got[j] == t)
            total[i] = len(target)

    def summary(sel: np.ndarray) -> dict[str, float]:
        return {
            "ade": float(disp[sel].mean()),
            "fde": float(disp[sel, -1].mean()),
            "speed_mae": float(speed_err[sel].mean()),
            "accuracy": float(correct[sel].sum() / total[sel].sum()),
            "count": int(sel.sum()),
        }

    overall = summary(np.ones(n, dtype=bool))
    classes = np.array([s.scenario_class for s in dataset])
    per_class = {str(c): summary(classes == c) for c in sorted(set(classes))}
    return EvalReport(
        overall["ade"], overall["fde"], overall["speed_mae"], overall["accuracy"], n, per_class
    )


def predict(
    model: Model, dataset: Sequence[DrivingSample], euler_steps: int = EULER_STEPS, seed: int = 0
) -> list[tuple[DrivingSample, list[int], np.ndarray, np.ndarray]]:
    """Per-sample (sample, decoded ids, waypoints (20, 2), speeds (10,)) in dataset order."""
    out: list = [None] * len(dataset)
    for batch in batches(dataset, 100):
        decoded, traj = predict_batch(model, batch, euler_steps, seed)
        for row, i in enumerate(batch.index):
            out[i] = (dataset[i], decoded[row], traj.waypoints[row], traj.speeds[row])
    return out


def single_batch(samples: Sequence[DrivingSample]) -> Batch:
    return collate(samples)
