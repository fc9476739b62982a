"""Pretraining loop: stage curriculum, MLM/DLM alternation, loss aggregation,
checkpointing, and metrics.

Every random choice is keyed by (seed, stream, step), so batch content is a
pure function of the config and the step — the loss trajectory is identical
whether a run goes straight through or resumes from a checkpoint.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .annotate import AnnotatedSentence, DialogueThread
from .checkpoint import TrainState, save_checkpoint
from .dialogue import DlmConfig, DlmExample, SentencePool, build_dlm_example
from .encoder import Encoder, ModelConfig
from .errors import ConfigError, DataError
from .masking import STAGES, MaskedExample, MaskingConfig, build_mlm_example
from .tensor import Adam, Tensor, add, cross_entropy, reshape
from .textnorm import PAD_ID, Vocabulary

TASK_MLM, TASK_DLM = "mlm", "dlm"
IGNORE_INDEX = -100

METRICS_FIELDS = ("step", "task", "stage", "mlm_loss", "dlm_cls_loss", "lr")


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 8
    stage_schedule: tuple[tuple[str, float], ...] = (("basic", 1.0),)
    schedule_mode: str = "sequential"  # "sequential" fractions or "mixed" weights
    dlm_ratio: float = 0.0
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    checkpoint_every: int = 0  # 0: only at the end

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps {self.total_steps} must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size {self.batch_size} must be >= 1")
        if not self.stage_schedule:
            raise ConfigError("stage_schedule is empty")
        for stage, _ in self.stage_schedule:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r} in schedule")
        values = [v for _, v in self.stage_schedule]
        if self.schedule_mode == "sequential":
            if abs(sum(values) - 1.0) > 1e-9:
                raise ConfigError(f"sequential schedule fractions sum to {sum(values)}, want 1")
        elif self.schedule_mode == "mixed":
            if any(v < 0 for v in values) or sum(values) <= 0:
                raise ConfigError("mixed schedule weights must be nonnegative and not all zero")
        else:
            raise ConfigError(f"schedule_mode {self.schedule_mode!r} must be sequential or mixed")
        if not 0.0 <= self.dlm_ratio <= 1.0:
            raise ConfigError(f"dlm_ratio {self.dlm_ratio} must be in [0,1]")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac {self.warmup_frac} must be in [0,1]")
        if self.lr <= 0:
            raise ConfigError(f"lr {self.lr} must be positive")


@dataclass
class LoadedSource:
    """One corpus source held in memory, with its mixing weight."""

    name: str
    kind: str  # "sentences" | "dialogues"
    weight: float
    sentences: list[AnnotatedSentence] = field(default_factory=list)
    threads: list[DialogueThread] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sentences", "dialogues"):
            raise ConfigError(f"source {self.name}: kind {self.kind!r}")
        if self.weight < 0:
            raise ConfigError(f"source {self.name}: negative weight")


def _weighted_pick(names: list[str], weights: list[float], rng: np.random.Generator) -> str:
    total = sum(weights)
    if total <= 0:
        raise ConfigError("all source weights are zero")
    u = rng.random() * total
    acc = 0.0
    for name, w in zip(names, weights):
        acc += w
        if u < acc:
            return name
    return names[-1]


def stage_at(cfg: TrainConfig, step: int, rng: np.random.Generator) -> str:
    """Sequential: stage whose cumulative fraction window contains the step.
    Mixed: weighted draw from the step-keyed rng."""
    if cfg.schedule_mode == "mixed":
        names = [s for s, _ in cfg.stage_schedule]
        weights = [w for _, w in cfg.stage_schedule]
        return _weighted_pick(names, weights, rng)
    acc = 0.0
    for stage, frac in cfg.stage_schedule:
        acc += frac
        if step < int(acc * cfg.total_steps):
            return stage
    return cfg.stage_schedule[-1][0]


def schedule_batches(
    cfg: TrainConfig, step: int, sources: Sequence[LoadedSource]
) -> tuple[str, str, str]:
    """(task, stage, source name) for one step; deterministic in (cfg, seed, step)."""
    if step >= cfg.total_steps:
        raise ConfigError(f"step {step} >= total_steps {cfg.total_steps}")
    rng = seeding.substream(cfg.seed, seeding.SCHEDULE, step)
    dialogue = [s for s in sources if s.kind == "dialogues"]
    sentence = [s for s in sources if s.kind == "sentences"]
    task = TASK_MLM
    if cfg.dlm_ratio > 0 and dialogue and rng.random() < cfg.dlm_ratio:
        task = TASK_DLM
    stage = stage_at(cfg, step, rng)
    pool = dialogue if task == TASK_DLM else sentence
    name = _weighted_pick([s.name for s in pool], [s.weight for s in pool], rng)
    return task, stage, name


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup over the first warmup_frac of steps, then linear decay."""
    warmup = max(1, int(cfg.warmup_frac * cfg.total_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    remaining = max(1, cfg.total_steps - warmup)
    return cfg.lr * max(0.0, (cfg.total_steps - step) / remaining)


@dataclass
class Batch:
    task: str
    stage: str
    input_ids: np.ndarray  # [B, L] int64
    type_ids: np.ndarray
    position_ids: np.ndarray
    targets: np.ndarray  # [B, L] int64, IGNORE_INDEX off the masked positions
    real_labels: np.ndarray | None = None  # [B] int64, DLM only (1 = real)

    @property
    def n_masked(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def collate(examples: Sequence[MaskedExample | DlmExample], task: str, stage: str) -> Batch:
    input_ids = np.array([e.input_ids for e in examples], dtype=np.int64)
    type_ids = np.array([e.type_ids for e in examples], dtype=np.int64)
    position_ids = np.array([e.position_ids for e in examples], dtype=np.int64)
    targets = np.full(input_ids.shape, IGNORE_INDEX, dtype=np.int64)
    for row, e in enumerate(examples):
        for pos, label in zip(e.mask_positions, e.labels):
            targets[row, pos] = label
    real_labels = None
    if task == TASK_DLM:
        real_labels = np.array([1 if e.is_real else 0 for e in examples], dtype=np.int64)
    return Batch(task, stage, input_ids, type_ids, position_ids, targets, real_labels)


@dataclass
class StepLosses:
    mlm_loss: float
    dlm_cls_loss: float | None


def train_step(
    batch: Batch,
    model: Encoder,
    optimizer: Adam,
    lr: float,
    dropout_rng: np.random.Generator | None,
) -> StepLosses | None:
    """One forward/backward/update. Returns None (no update) when the batch
    has zero masked positions."""
    if batch.n_masked == 0:
        return None
    h = model.forward(
        batch.input_ids,
        batch.type_ids,
        batch.position_ids,
        pad_mask=batch.input_ids == PAD_ID,
        train=True,
        rng=dropout_rng,
    )
    logits = model.mlm_logits(h)
    b, length, vocab = logits.shape
    mlm_loss = cross_entropy(
        reshape(logits, (b * length, vocab)), batch.targets.reshape(-1), IGNORE_INDEX
    )
    loss: Tensor = mlm_loss
    dlm_cls_loss = None
    if batch.task == TASK_DLM:
        cls_logits = model.real_fake_logits(h)
        dlm_cls_loss = cross_entropy(cls_logits, batch.real_labels)
        loss = add(mlm_loss, dlm_cls_loss)
    optimizer.zero_grad()
    loss.backward()
    optimizer.lr = lr
    optimizer.step()
    return StepLosses(
        mlm_loss=mlm_loss.item(),
        dlm_cls_loss=None if dlm_cls_loss is None else dlm_cls_loss.item(),
    )


class MetricsWriter:
    """Append-only CSV: step,task,stage,mlm_loss,dlm_cls_loss,lr."""

    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self._f = open(path, "a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(METRICS_FIELDS)

    def write(self, step: int, task: str, stage: str, losses: StepLosses, lr: float) -> None:
        cls = "" if losses.dlm_cls_loss is None else repr(losses.dlm_cls_loss)
        self._w.writerow([step, task, stage, repr(losses.mlm_loss), cls, repr(lr)])
        self._f.flush()

    def close(self) -> None:
        self._f.close()


class Pretrainer:
    """Drives the loop from `state.step` to total_steps over loaded sources."""

    def __init__(
        self,
        state: TrainState,
        train_cfg: TrainConfig,
        masking_cfg: MaskingConfig,
        dlm_cfg: DlmConfig,
        vocab: Vocabulary,
        sources: Sequence[LoadedSource],
    ):
        train_cfg.validate()
        masking_cfg.validate()
        dlm_cfg.validate()
        self.state = state
        self.cfg = train_cfg
        self.masking_cfg = masking_cfg
        self.dlm_cfg = dlm_cfg
        self.vocab = vocab
        self.sources = {s.name: s for s in sources}
        self.skipped_batches = 0

        dialogue_sources = [s for s in sources if s.kind == "dialogues"]
        if train_cfg.dlm_ratio > 0 and not dialogue_sources:
            raise ConfigError("dlm_ratio > 0 but no dialogue source is configured")
        for s in sources:
            if s.kind == "sentences" and not s.sentences:
                raise DataError(f"source {s.name}: no sentences")
            if s.kind == "dialogues" and not s.threads:
                raise DataError(f"source {s.name}: no dialogue threads")
        self.pool = None
        if dialogue_sources:
            turns = [sent for s in dialogue_sources for t in s.threads for _, sent in t.turns]
            self.pool = SentencePool(turns)

    def build_batch(self, step: int) -> Batch:
        task, stage, source_name = schedule_batches(self.cfg, step, list(self.sources.values()))
        source = self.sources[source_name]
        pick_rng = seeding.substream(self.cfg.seed, seeding.BATCH, step)
        if task == TASK_MLM:
            idx = pick_rng.integers(0, len(source.sentences), size=self.cfg.batch_size)
            mask_rng = seeding.substream(self.cfg.seed, seeding.MASKING, step)
            examples = [
                build_mlm_example(source.sentences[int(i)], None, stage, self.masking_cfg, mask_rng, self.vocab)
                for i in idx
            ]
        else:
            idx = pick_rng.integers(0, len(source.threads), size=self.cfg.batch_size)
            dlm_rng = seeding.substream(self.cfg.seed, seeding.DLM, step)
            examples = [
                build_dlm_example(source.threads[int(i)], self.pool, self.dlm_cfg, dlm_rng, self.vocab)
                for i in idx
            ]
        return collate(examples, task, stage)

    def run(self, out_dir, log_every: int = 0) -> TrainState:
        os.makedirs(out_dir, exist_ok=True)
        metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
        try:
            for step in range(self.state.step, self.cfg.total_steps):
                batch = self.build_batch(step)
                lr = lr_at(self.cfg, step)
                dropout_rng = seeding.substream(self.cfg.seed, seeding.DROPOUT, step)
                losses = train_step(batch, self.state.model, self.state.optimizer, lr, dropout_rng)
                self.state.step = step + 1
                if losses is None:
                    self.skipped_batches += 1
                    continue
                metrics.write(step, batch.task, batch.stage, losses, lr)
                if log_every and (step + 1) % log_every == 0:
                    print(f"step {step + 1}/{self.cfg.total_steps} {batch.task}/{batch.stage} mlm_loss {losses.mlm_loss:.4f}")
                if self.cfg.checkpoint_every and (step + 1) % self.cfg.checkpoint_every == 0:
                    save_checkpoint(os.path.join(out_dir, f"step{step + 1:06d}.ckpt"), self.state)
        finally:
            metrics.close()
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), self.state)
        return self.state
