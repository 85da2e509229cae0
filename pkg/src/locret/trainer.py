"""Two-stage training: contrastive alignment on image-report pairs, then
triplet metric learning on mined location-conditioned triplets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .corpus import CorpusSample, Vocab, mirror_sample
from .losses import LossConfig, stage1_loss, triplet_loss
from .mining import embed_condition_queries, sample_triplets
from .model import VisionLanguageModel


class TrainingError(RuntimeError):
    """Raised when optimization aborts (e.g. non-finite loss)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    The attention stack trains under decoupled weight decay (0.01), the
    encoders under classic coupled decay (1e-5). Desk-scale default learning
    rates are 1e-3; ``TrainConfig.paper(...)`` selects the published 5e-6.
    """

    stage: int = 1
    epochs: int = 10
    batch_size: int = 32
    lr_attention: float = 1e-3
    lr_encoders: float = 1e-3
    wd_attention: float = 0.01
    wd_encoders: float = 1e-5
    seed: int = 0
    flip_augment: bool = False
    hard_region_negatives: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_attention < 0 or self.lr_encoders < 0:
            raise ValueError("learning rates must be non-negative")
        min_batch = 2 if self.stage == 1 else 1
        if self.batch_size < min_batch:
            raise ValueError(
                f"stage {self.stage} needs batch_size >= {min_batch} "
                f"(contrastive losses degenerate below that)")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        kwargs = dict(lr_attention=5e-6, lr_encoders=5e-6)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class TrainReport:
    """Per-step loss curves plus the exact configuration that produced them."""

    stage: int
    seed: int
    epochs: int
    steps_per_epoch: int
    curves: list[dict]
    config: TrainConfig

    def final_loss(self) -> float:
        return self.curves[-1]["loss"]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.curves:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _optimizers(model: VisionLanguageModel, config: TrainConfig):
    return (
        torch.optim.AdamW(model.attention_parameters(), lr=config.lr_attention,
                          weight_decay=config.wd_attention),
        torch.optim.Adam(model.encoder_parameters(), lr=config.lr_encoders,
                         weight_decay=config.wd_encoders),
    )


def _mirror_batch(batch: Sequence[CorpusSample], flips: np.ndarray,
                  vocab: Vocab) -> list[CorpusSample]:
    return [mirror_sample(s, vocab) if flip else s
            for s, flip in zip(batch, flips)]


def _stage1_batches(n: int, batch_size: int, order: np.ndarray):
    """Consecutive chunks of the permuted order; a trailing singleton is dropped."""
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def stage1_steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return len(_stage1_batches(n_samples, batch_size, np.arange(n_samples)))


def train_stage1(config: TrainConfig, samples: Sequence[CorpusSample],
                 model: VisionLanguageModel,
                 vocab: Vocab | None = None) -> tuple[VisionLanguageModel, TrainReport]:
    """Minimize global + beta * local alignment over shuffled pair batches.

    With ``flip_augment`` on, each sample is independently left-right mirrored
    (image and report together) with probability 1/2 per epoch, which requires
    the vocabulary to swap lateral words.
    """
    if config.stage != 1:
        raise ValueError("config.stage must be 1")
    if len(samples) < 2:
        raise TrainingError("stage 1 needs at least 2 samples")
    if config.flip_augment and vocab is None:
        raise TrainingError("flip_augment needs the corpus vocabulary "
                            "to mirror reports alongside images")
    rng = np.random.default_rng(config.seed)
    opt_attn, opt_enc = _optimizers(model, config)
    curves: list[dict] = []
    steps_per_epoch = stage1_steps_per_epoch(len(samples), config.batch_size)
    global_step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        flips = rng.random(len(samples)) < 0.5 if config.flip_augment else None
        for batch_idx in _stage1_batches(len(samples), config.batch_size, order):
            batch = [samples[i] for i in batch_idx]
            if flips is not None:
                batch = _mirror_batch(batch, flips[batch_idx], vocab)
            pairs = model.forward_samples(batch, pad_to=max(len(s.report) for s in batch))
            loss = stage1_loss(config.loss, pairs)
            if not torch.isfinite(loss.total):
                raise TrainingError(f"non-finite loss at step {global_step}", global_step)
            opt_attn.zero_grad()
            opt_enc.zero_grad()
            loss.total.backward()
            opt_attn.step()
            opt_enc.step()
            curves.append({
                "stage": 1, "epoch": epoch, "step": global_step,
                "loss": loss.total.item(), "global": loss.global_term.item(),
                "local": loss.local_term.item(),
            })
            global_step += 1
    return model, TrainReport(stage=1, seed=config.seed, epochs=config.epochs,
                              steps_per_epoch=steps_per_epoch, curves=curves,
                              config=config)


def train_stage2(config: TrainConfig, samples: Sequence[CorpusSample],
                 model: VisionLanguageModel,
                 vocab: Vocab) -> tuple[VisionLanguageModel, TrainReport]:
    """Minimize the triplet hinge on freshly mined location-conditioned triplets."""
    if config.stage != 2:
        raise ValueError("config.stage must be 2")
    by_id = {s.id: s for s in samples}
    rng = np.random.default_rng(config.seed)
    opt_attn, opt_enc = _optimizers(model, config)
    curves: list[dict] = []
    steps_per_epoch = max(1, len(samples) // config.batch_size)
    global_step = 0
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            mining_seed = int(rng.integers(2**31 - 1))
            triplets = sample_triplets(samples, config.batch_size, mining_seed,
                                       config.hard_region_negatives)
            conditions = [t.condition for t in triplets]
            anchors = embed_condition_queries(
                model, vocab, [by_id[t.anchor_id] for t in triplets], conditions)
            positives = embed_condition_queries(
                model, vocab, [by_id[t.positive_id] for t in triplets], conditions)
            negatives = embed_condition_queries(
                model, vocab, [by_id[t.negative_id] for t in triplets], conditions)
            loss = triplet_loss(config.loss, anchors, positives, negatives)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {global_step}", global_step)
            opt_attn.zero_grad()
            opt_enc.zero_grad()
            loss.backward()
            opt_attn.step()
            opt_enc.step()
            curves.append({"stage": 2, "epoch": epoch, "step": global_step,
                           "loss": loss.item()})
            global_step += 1
    return model, TrainReport(stage=2, seed=config.seed, epochs=config.epochs,
                              steps_per_epoch=steps_per_epoch, curves=curves,
                              config=config)


def evaluate_stage1_loss(model: VisionLanguageModel, samples: Sequence[CorpusSample],
                         loss_config: LossConfig, batch_size: int = 32) -> float:
    """Mean stage-1 loss over fixed, in-order batches (no shuffling, no grad)."""
    batches = _stage1_batches(len(samples), batch_size, np.arange(len(samples)))
    if not batches:
        raise ValueError("need at least 2 samples to evaluate the stage-1 loss")
    totals = []
    with torch.no_grad():
        for batch_idx in batches:
            batch = [samples[i] for i in batch_idx]
            pairs = model.forward_samples(batch, pad_to=max(len(s.report) for s in batch))
            totals.append(float(stage1_loss(loss_config, pairs).total))
    return float(np.mean(totals))
