"""Frame-level evaluation: per-class average precision, reports, attention dumps.

AP is the mean, over positive frames, of the precision at each positive's
rank in the pooled score ordering (descending, ties broken by position).
Frames from all test clips are pooled into one ranking per class; classes
without a positive test frame are excluded from the mean and listed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureClip
from .errors import ContractError, MultitransError
from .model import ModelConfig, ModelParams, forward_clip
from .tensor import no_grad


class UndefinedAP(MultitransError):
    """Average precision is undefined: the label vector has no positives."""


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive, descending-score order.

    Ties are broken by original index ascending. Raises :class:`UndefinedAP`
    when there is no positive label, so callers must exclude rather than
    score such classes.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ContractError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary")
    total_pos = int(np.sum(y))
    if total_pos == 0:
        raise UndefinedAP("no positive labels; AP is undefined")
    order = np.argsort(-s, kind="stable")
    hits = y[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, s.size + 1)
    return float(np.sum(precision * hits) / total_pos)


@dataclass
class EvalReport:
    """Per-class AP plus their mean, with enough context to reproduce it."""

    class_names: tuple[str, ...]
    per_class_ap: dict[str, float]
    excluded_classes: tuple[str, ...]
    map_score: float
    num_test_frames: int
    checkpoint_id: str
    model_config: dict

    def to_dict(self) -> dict:
        return {
            "map": _sig6(self.map_score),
            "per_class_ap": {name: _sig6(ap) for name, ap in self.per_class_ap.items()},
            "excluded_classes": list(self.excluded_classes),
            "num_test_frames": self.num_test_frames,
            "checkpoint_id": self.checkpoint_id,
            "model_config": self.model_config,
        }


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def report_from_scores(
    scored_clips: list[tuple[str, np.ndarray, np.ndarray]],
    class_names,
    checkpoint_id: str = "",
    model_config: dict | None = None,
) -> EvalReport:
    """Pool (clip_id, [T x C] scores, [T x C] strong labels) into an EvalReport.

    Clips are pooled in clip_id order, so the report does not depend on the
    order they are passed in.
    """
    if not scored_clips:
        raise ContractError("nothing to evaluate")
    class_names = tuple(class_names)
    ordered = sorted(scored_clips, key=lambda item: item[0])
    ids = [cid for cid, _, _ in ordered]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate clip ids in evaluation input")
    scores = np.concatenate([s for _, s, _ in ordered], axis=0)
    labels = np.concatenate([g for _, _, g in ordered], axis=0)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != len(class_names):
        raise ContractError(
            f"pooled scores {scores.shape} and labels {labels.shape} must be "
            f"[frames x {len(class_names)}]"
        )
    per_class: dict[str, float] = {}
    excluded: list[str] = []
    for c, name in enumerate(class_names):
        try:
            per_class[name] = average_precision(scores[:, c], labels[:, c])
        except UndefinedAP:
            excluded.append(name)
    if not per_class:
        raise ContractError("every class lacks positive test frames; mAP undefined")
    return EvalReport(
        class_names=class_names,
        per_class_ap=per_class,
        excluded_classes=tuple(excluded),
        map_score=float(np.mean(list(per_class.values()))),
        num_test_frames=int(scores.shape[0]),
        checkpoint_id=checkpoint_id,
        model_config=model_config or {},
    )


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    test_clips: list[FeatureClip],
    class_names=None,
    checkpoint_id: str = "",
) -> EvalReport:
    """Score every frame of every test clip with the model and pool per class."""
    if not test_clips:
        raise ContractError("empty test split")
    for clip in test_clips:
        if clip.strong_label is None:
            raise ContractError(f"test clip {clip.clip_id!r} has no strong label")
    if class_names is None:
        class_names = tuple(f"class{c}" for c in range(config.num_classes))
    scored = []
    with no_grad():
        for clip in test_clips:
            probs, _ = forward_clip(clip, params, config, collect_attention=False)
            scored.append((clip.clip_id, probs.data, clip.strong_label))
    return report_from_scores(
        scored, class_names, checkpoint_id=checkpoint_id, model_config=config.to_dict()
    )


@dataclass
class AttentionDump:
    """Flat attention-weight table for one clip, one row per matrix entry.

    ``weight_normalized`` is the weight scaled by the sensor count, so a
    uniformly attending head reads 1.0 everywhere.
    """

    clip_id: str
    num_sensors: int
    rows: list[tuple[int, int, int, int, int, float, float]] = field(repr=False)

    HEADER = (
        "clip_id",
        "frame",
        "layer",
        "head",
        "query_sensor",
        "key_sensor",
        "weight",
        "weight_normalized",
    )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for frame, layer, head, q, k, w, wn in self.rows:
                writer.writerow(
                    [self.clip_id, frame, layer, head, q, k, f"{w:.6g}", f"{wn:.6g}"]
                )


def dump_attention(params: ModelParams, config: ModelConfig, clip) -> AttentionDump:
    """All attention weights of a clip, every layer, head, and frame."""
    if config.variant != "multitrans":
        raise ContractError("the baseline variant has no attention to dump")
    clip_id = getattr(clip, "clip_id", "clip")
    with no_grad():
        _, records = forward_clip(clip, params, config, collect_attention=True)
    s = config.num_sensors
    rows = []
    for rec in sorted(records, key=lambda r: (r.frame, r.layer, r.head)):
        for q in range(s):
            for k in range(s):
                w = float(rec.weights[q, k])
                rows.append((rec.frame, rec.layer, rec.head, q, k, w, w * s))
    return AttentionDump(clip_id=clip_id, num_sensors=s, rows=rows)


def write_metrics_csv(path, report: EvalReport) -> None:
    """Per-class AP as CSV with the fixed (class, ap) header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap"])
        for name in report.class_names:
            if name in report.per_class_ap:
                writer.writerow([name, f"{report.per_class_ap[name]:.6g}"])


def write_report_json(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
