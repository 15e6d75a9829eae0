"""Staged delta-tuning pipeline.

Each stage trains only a declared set of parameter groups: the first two
visual stages touch the patch embedding, positional grid, projector, and
visual experts; the alignment stage additionally unfreezes attention;
the instruction stage trains everything. Frozen parameters are
bit-untouched, optimizer moments exist only for trainable parameters,
and every batch/drop-path draw is a pure function of (seed, step, slot),
so interrupted runs resume step-for-step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import save_checkpoint
from .synthdata import SynthDataset, dataset
from .tensor import zero_grads

logger = logging.getLogger("monomoe.training")

S1_1 = "S1.1"
S1_2 = "S1.2"
S1_3 = "S1.3"
S2 = "S2"
CUSTOM = "CUSTOM"
STAGES = (S1_1, S1_2, S1_3, S2, CUSTOM)

DELTA_GROUPS = (M.PATCH_EMBED, M.VIS_PE, M.VIS_PROJ, M.FFN_V)
TEXT_PATH_GROUPS = (M.TEXT_EMBED, M.ATTN, M.FFN_T, M.NORM, M.HEAD)

CONSTANT_WARMUP = "constant_warmup"
COSINE = "cosine"


class ConfigError(ValueError):
    """Invalid stage configuration."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite."""


@dataclass(frozen=True)
class StageConfig:
    stage: str
    data_mix: str
    max_patches: int
    peak_lr: float
    schedule: str
    warmup_steps: int
    total_steps: int
    batch_size: int = 4
    grad_accum: int = 1
    weight_decay: float = 0.01
    drop_path: float = 0.1
    data_size: int = 256
    trainable_groups: tuple = ()  # only consulted for CUSTOM stages

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.max_patches <= 0:
            raise ConfigError("max_patches must be positive")
        if self.schedule not in (CONSTANT_WARMUP, COSINE):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size % self.grad_accum:
            raise ConfigError("batch_size must be divisible by grad_accum")
        if self.stage == CUSTOM and not self.trainable_groups:
            raise ConfigError("CUSTOM stage needs explicit trainable_groups")


# full-scale stage constants, kept as a documented preset; the step
# budgets assume the original data volumes and are not runnable here
PAPER_STAGES = {
    S1_1: StageConfig(S1_1, "concept", 1280, 1e-4, CONSTANT_WARMUP, 100, 450_000,
                      batch_size=2048, data_size=922_000_000),
    S1_2: StageConfig(S1_2, "semantic", 1792, 1e-4, CONSTANT_WARMUP, 100, 126_000,
                      batch_size=2048, data_size=258_000_000),
    S1_3: StageConfig(S1_3, "align", 3328, 5e-5, COSINE, 100, 70_000,
                      batch_size=2048, data_size=143_000_000),
    S2: StageConfig(S2, "instruct", 6400, 2e-5, COSINE, 420, 14_000,
                    batch_size=1024, grad_accum=4, data_size=5_000_000),
}

# minutes-scale analogs: same structure, caps scaled to the 64px tile,
# learning rates sized for a fresh small model
DESK_STAGES = {
    S1_1: StageConfig(S1_1, "concept", 128, 2e-3, CONSTANT_WARMUP, 20, 200,
                      batch_size=4, data_size=256),
    S1_2: StageConfig(S1_2, "semantic", 192, 2e-3, CONSTANT_WARMUP, 20, 200,
                      batch_size=4, data_size=256),
    S1_3: StageConfig(S1_3, "align", 320, 1e-3, COSINE, 20, 200,
                      batch_size=4, data_size=256),
    S2: StageConfig(S2, "instruct", 640, 1e-3, COSINE, 20, 200,
                    batch_size=4, grad_accum=2, data_size=256),
}

# the desk stand-in for a pre-trained text model: full text-path training
# on arithmetic text before any visual stage
DESK_BASE = StageConfig(CUSTOM, "text_only", 128, 3e-3, COSINE, 20, 300,
                        batch_size=8, data_size=512, drop_path=0.0,
                        trainable_groups=TEXT_PATH_GROUPS)


def stage_preset(stage: str, scale: str = "desk") -> StageConfig:
    table = DESK_STAGES if scale == "desk" else PAPER_STAGES
    if stage not in table:
        raise ConfigError(f"no {scale} preset for stage {stage!r}")
    return table[stage]


# ---------------------------------------------------------------------------
# freeze masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreezeMask:
    """Per-group trainability for one stage."""

    trainable_groups: frozenset

    def trainable(self, group: str) -> bool:
        return group in self.trainable_groups

    @property
    def frozen_groups(self) -> frozenset:
        return frozenset(M.GROUPS) - self.trainable_groups


def build_freeze_mask(cfg: StageConfig) -> FreezeMask:
    if cfg.stage in (S1_1, S1_2):
        groups = DELTA_GROUPS
    elif cfg.stage == S1_3:
        groups = DELTA_GROUPS + (M.ATTN,)
    elif cfg.stage == S2:
        groups = M.GROUPS
    elif cfg.stage == CUSTOM:
        groups = cfg.trainable_groups
    else:
        raise ConfigError(f"unknown stage {cfg.stage!r}")
    unknown = set(groups) - set(M.GROUPS)
    if unknown:
        raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
    if not groups:
        raise ConfigError("trainable set must be non-empty")
    return FreezeMask(trainable_groups=frozenset(groups))


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, cfg: StageConfig) -> float:
    """Linear warmup to the peak, then constant or cosine decay to zero."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.schedule == CONSTANT_WARMUP:
        return cfg.peak_lr
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    """First/second moments keyed by parameter name, trainable only."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adamw_step(model: M.MMoEModel, freeze: FreezeMask, state: AdamWState,
               lr: float, weight_decay: float) -> None:
    """One decoupled-weight-decay Adam update over the trainable groups.

    Frozen parameters (and their absent moment buffers) are untouched;
    a missing gradient counts as zero.
    """
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p, group in model.parameters():
        if not freeze.trainable(group):
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {name} at optimizer step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# stage loop
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    losses: list            # (step, mean batch loss)
    state: AdamWState
    final_step: int


def _droppath_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7, step, slot])


def train_stage(model: M.MMoEModel, cfg: StageConfig, seed: int = 0,
                ds: SynthDataset | None = None, start_step: int = 0,
                state: AdamWState | None = None, log_every: int = 50,
                run_steps: int | None = None, sequence_hook=None) -> StageResult:
    """Run (a slice of) one stage; deterministic given (model, cfg, seed).

    Batches are drawn by a step-indexed counter over the dataset (cycling
    past the end), gradients are averaged over the global batch via
    loss-scaled micro-batches, and the optimizer touches only the stage's
    trainable groups. `sequence_hook`, when given, rewrites each encoded
    sequence before the forward pass (ablation arms use it to relabel
    routing).
    """
    freeze = build_freeze_mask(cfg)
    model.set_trainable(freeze.trainable_groups)
    if state is None:
        state = AdamWState()  # fresh moments at every stage boundary
    if ds is None:
        ds = dataset(cfg.data_mix, cfg.data_size, seed)
    stop_step = cfg.total_steps if run_steps is None else min(
        cfg.total_steps, start_step + run_steps)

    params = [t for _, t, _ in model.parameters()]
    losses = []
    for step in range(start_step, stop_step):
        lr = lr_at(step, cfg)
        zero_grads(params)
        batch_loss = 0.0
        # grad accumulation realizes the batch as loss-averaged micro
        # batches; processing samples one by one makes that exact
        for slot in range(cfg.batch_size):
            sample = ds[(step * cfg.batch_size + slot) % len(ds)]
            seq = M.encode_sample(model, sample.prompt, sample.response,
                                  sample.image, cfg.max_patches)
            if sequence_hook is not None:
                seq = sequence_hook(seq)
            loss = M.sequence_loss(model, seq, train=True,
                                   rng=_droppath_rng(seed, step, slot),
                                   drop_path=cfg.drop_path)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss {value} at stage {cfg.stage} step {step} slot {slot}")
            batch_loss += value / cfg.batch_size
            (loss / cfg.batch_size).backward()
        adamw_step(model, freeze, state, lr, cfg.weight_decay)
        losses.append((step, batch_loss))
        if log_every and (step % log_every == 0 or step == stop_step - 1):
            logger.info("stage %s step %d/%d lr %.2e loss %.4f",
                        cfg.stage, step, cfg.total_steps, lr, batch_loss)
    return StageResult(stage=cfg.stage, losses=losses, state=state,
                       final_step=stop_step)


def run_pipeline(model: M.MMoEModel, stages, seed: int = 0,
                 out_dir=None, log_every: int = 50) -> dict:
    """Chain stages in order, checkpointing after each.

    A failing stage halts the pipeline; checkpoints of completed stages
    remain on disk.
    """
    results = {}
    checkpoints = {}
    for cfg in stages:
        result = train_stage(model, cfg, seed=seed, log_every=log_every)
        results[cfg.stage] = result
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"stage_{cfg.stage}.ckpt"
            save_checkpoint(model, path, optimizer=result.state,
                            extra={"stage": cfg.stage, "step": result.final_step})
            checkpoints[cfg.stage] = path
            logger.info("stage %s checkpoint written to %s", cfg.stage, path)
    return {"results": results, "checkpoints": checkpoints}


def prepare_base_model(model_cfg: M.ModelConfig, seed: int = 0,
                       base_cfg: StageConfig = DESK_BASE,
                       log_every: int = 100) -> M.MMoEModel:
    """The desk stand-in for a pre-trained LLM: train the text path on
    text-only data, then seed the visual experts from the text FFNs."""
    model = M.MMoEModel(model_cfg, seed=seed)
    train_stage(model, base_cfg, seed=seed, log_every=log_every)
    M.init_visual_experts(model)
    return model
