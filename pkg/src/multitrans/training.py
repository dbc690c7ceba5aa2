"""Weakly-supervised training: bag pooling, weighted BCE, AdamW, the loop.

A clip's frame probabilities are pooled by their time mean into a bag
prediction, which the class-weighted binary cross entropy compares against
the clip-level weak label. AdamW with decoupled weight decay and an
exponentially decaying learning rate drives the updates. The whole loop is
deterministic given its seed: same seed, same loss history, bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EventDataset, FeatureClip
from .errors import ContractError, NumericError
from .model import ModelConfig, ModelParams, forward_frames, init_params, save_checkpoint
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.01
    final_decay: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 8
    clip_len: int = 32
    seed: int = 0
    prob_clamp: float = 1e-7
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.final_decay <= 1.0:
            raise ContractError(f"final_decay must be in (0, 1], got {self.final_decay}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ContractError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")
        if self.batch_size < 1 or self.clip_len < 1:
            raise ContractError("batch_size and clip_len must be positive")
        if self.checkpoint_every < 0:
            raise ContractError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr0": self.lr0,
            "final_decay": self.final_decay,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
            "batch_size": self.batch_size,
            "clip_len": self.clip_len,
            "seed": self.seed,
            "prob_clamp": self.prob_clamp,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def bag_predict(frame_probs: Tensor) -> Tensor:
    """Bag prediction: the arithmetic mean over the time axis, differentiable.

    [T x C] -> [C]; leading batch axes pass through ([B x T x C] -> [B x C]).
    """
    if frame_probs.ndim < 2:
        raise ContractError(f"bag_predict needs [frames x classes], got shape {frame_probs.shape}")
    if frame_probs.shape[-2] < 1:
        raise ContractError("bag_predict over an empty frame sequence")
    return T.reduce_mean(frame_probs, axis=-2)


def class_weights(event_counts) -> np.ndarray:
    """Per-class loss weights: the reciprocal of the training event count."""
    counts = np.asarray(event_counts)
    if counts.ndim != 1 or counts.size == 0:
        raise ContractError(f"event counts must be a nonempty vector, got shape {counts.shape}")
    if np.any(counts < 1):
        missing = np.flatnonzero(counts < 1).tolist()
        raise ContractError(f"classes {missing} have no training events")
    return 1.0 / counts.astype(np.float64)


def weighted_bce(bag_preds: Tensor, bag_labels, weights, clamp: float = 1e-7) -> Tensor:
    """Class-weighted binary cross entropy over a batch of bag predictions.

    Predictions are clamped to [clamp, 1 - clamp] before the logs, which is
    the only thing keeping the loss finite at saturated sigmoids.
    """
    labels = np.asarray(bag_labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if bag_preds.ndim != 2:
        raise ContractError(f"bag predictions must be [batch x classes], got {bag_preds.shape}")
    if labels.shape != bag_preds.shape:
        raise ContractError(f"labels shape {labels.shape} != predictions shape {bag_preds.shape}")
    if w.shape != (bag_preds.shape[1],):
        raise ContractError(f"weights shape {w.shape} does not match {bag_preds.shape[1]} classes")
    batch = bag_preds.shape[0]
    p = T.clamp(bag_preds, clamp, 1.0 - clamp)
    pos = T.mul(Tensor(labels), T.log(p))
    neg = T.mul(Tensor(1.0 - labels), T.log(1.0 - p))
    weighted = T.mul(Tensor(np.tile(w, (batch, 1))), T.add(pos, neg))
    return T.scale(T.reduce_sum(weighted), -1.0 / batch)


@dataclass
class OptimizerState:
    """AdamW moment estimates, keyed by parameter path."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        named = params.named()
        return cls(
            m={name: np.zeros(p.shape) for name, p in named},
            v={name: np.zeros(p.shape) for name, p in named},
        )


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.named():
        if name not in grads:
            raise ContractError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"gradient/state shape mismatch for {name!r}")
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam) + cfg.weight_decay * p.data
        p.data -= lr * update


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponential decay reaching lr0 * final_decay exactly at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    if cfg.epochs == 1 or epoch == 0:
        return cfg.lr0
    if epoch == cfg.epochs - 1:
        return cfg.lr0 * cfg.final_decay
    return cfg.lr0 * cfg.final_decay ** (epoch / (cfg.epochs - 1))


def sample_clip(clip: FeatureClip, length: int, rng) -> FeatureClip:
    """A contiguous random window of ``length`` frames under the parent's bag label.

    The window inherits the parent's weak label unchanged (the parent's
    events may fall outside the window, so no strong label is attached).
    """
    total = clip.num_frames
    if total < length:
        raise ContractError(f"clip {clip.clip_id!r} has {total} frames, need {length}")
    onset = int(rng.integers(0, total - length + 1))
    return FeatureClip(
        features=clip.features[onset : onset + length].copy(),
        modality_tags=clip.modality_tags,
        weak_label=clip.weak_label,
        strong_label=None,
        clip_id=f"{clip.clip_id}[{onset}:{onset + length}]",
    )


def train(
    dataset: EventDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[ModelParams, list[tuple[int, float, float]]]:
    """Seeded deterministic MIL loop.

    Per epoch: shuffle scenes, cut into batches, sample one random window
    per scene, pool frame probabilities into bag predictions, apply the
    weighted BCE, backprop, and take an AdamW step at the scheduled rate.
    Returns the final parameters and one (epoch, lr, mean_loss) row per
    epoch. ``checkpoint_dir`` enables periodic checkpoints every
    ``train_cfg.checkpoint_every`` epochs.
    """
    if not dataset.train:
        raise ContractError("training split is empty")
    weights = class_weights(dataset.train_event_counts)
    params = init_params(model_cfg, seed=train_cfg.seed)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    history: list[tuple[int, float, float]] = []
    num_classes = model_cfg.num_classes

    for epoch in range(train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        order = rng.permutation(len(dataset.train))
        batch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = order[start : start + train_cfg.batch_size]
            windows = [
                sample_clip(dataset.train[i], min(train_cfg.clip_len, dataset.train[i].num_frames), rng)
                for i in chunk
            ]
            rows = []
            for window in windows:
                probs = forward_frames(window.features, params, model_cfg)
                rows.append(T.reshape(bag_predict(probs), (1, num_classes)))
            bag_preds = T.concat(rows, axis=0)
            labels = np.stack([w.weak_label.values for w in windows])
            loss = weighted_bce(bag_preds, labels, weights, train_cfg.prob_clamp)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // train_cfg.batch_size}"
                )
            T.backward(loss)
            grads = {name: p.grad for name, p in params.named()}
            adamw_step(params, grads, state, lr, train_cfg)
            batch_losses.append(loss_value)
        history.append((epoch, lr, float(np.mean(batch_losses))))
        if (
            checkpoint_dir is not None
            and train_cfg.checkpoint_every > 0
            and (epoch + 1) % train_cfg.checkpoint_every == 0
        ):
            path = Path(checkpoint_dir) / f"checkpoint-epoch{epoch + 1:04d}.json"
            save_checkpoint(path, params, model_cfg)
    return params, history


def write_loss_csv(path, history: list[tuple[int, float, float]]) -> None:
    """Training history as CSV: epoch, lr, mean_loss (6 significant digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "mean_loss"])
        for epoch, lr, mean_loss in history:
            writer.writerow([epoch, f"{lr:.6g}", f"{mean_loss:.6g}"])
