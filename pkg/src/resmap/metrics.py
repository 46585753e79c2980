"""Aggregation of sampled segmentations and agreement metrics.

A set of sampled level maps is reduced to a per-pixel categorical
distribution with an entropy map.  Agreement between sets of maps is
measured by IoU and by the generalized energy distance under the
distance d = 1 - mean IoU over present classes.  Risk flagging marks
pixels whose combined heavy/ponding probability crosses a threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .field import N_LEVELS, LEVEL_HEAVY, LEVEL_PONDING

__all__ = [
    "ResidueDistributionMap",
    "MetricsReport",
    "aggregate",
    "coverage_fractions",
    "iou",
    "mean_iou",
    "ged",
    "flag_risk",
    "build_metrics_report",
]


@dataclass(frozen=True)
class ResidueDistributionMap:
    """Per-pixel categorical distribution over the five residue levels."""

    probabilities: np.ndarray  # (5, H, W) float32, each pixel sums to 1
    entropy: np.ndarray        # (H, W) float32, nats
    sample_count: int

    def __post_init__(self) -> None:
        p = self.probabilities
        if p.ndim != 3 or p.shape[0] != N_LEVELS:
            raise ValueError(f"probabilities must be ({N_LEVELS}, H, W), got {p.shape}")
        if self.entropy.shape != p.shape[1:]:
            raise ValueError("entropy extent does not match probabilities")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        sums = p.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("per-pixel probabilities must sum to 1")

    @property
    def height(self) -> int:
        return self.probabilities.shape[1]

    @property
    def width(self) -> int:
        return self.probabilities.shape[2]


@dataclass(frozen=True)
class MetricsReport:
    """Agreement summary for one evaluated tile or tile set."""

    pixel_accuracy: float
    class_iou: tuple
    mean_iou: float
    ged: float
    sample_count: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.pixel_accuracy <= 1.0:
            raise ValueError("pixel_accuracy outside [0, 1]")
        if len(self.class_iou) != N_LEVELS:
            raise ValueError(f"class_iou must have {N_LEVELS} entries")
        for v in self.class_iou:
            if not 0.0 <= v <= 1.0:
                raise ValueError("class IoU outside [0, 1]")
        if not 0.0 <= self.mean_iou <= 1.0:
            raise ValueError("mean_iou outside [0, 1]")
        if self.ged < -1e-6:
            raise ValueError("ged below -1e-6")

    def to_json(self) -> str:
        payload = {
            "pixel_accuracy": self.pixel_accuracy,
            "class_iou": list(self.class_iou),
            "mean_iou": self.mean_iou,
            "ged": self.ged,
            "sample_count": self.sample_count,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _check_level_map(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ValueError(f"{name} has zero extent")
    if m.min() < 0 or m.max() >= N_LEVELS:
        raise ValueError(f"{name} contains values outside [0, {N_LEVELS})")
    return m.astype(np.int64, copy=False)


def aggregate(samples: Sequence[np.ndarray]) -> ResidueDistributionMap:
    """Reduce M sampled level maps to per-pixel class frequencies.

    Entropy uses the convention 0 * ln 0 = 0, so one-hot pixels score
    exactly zero.
    """
    if len(samples) < 1:
        raise ValueError("aggregate requires at least one sample")
    first = _check_level_map(samples[0], "samples[0]")
    h, w = first.shape
    counts = np.zeros((N_LEVELS, h, w), dtype=np.float64)
    for i, s in enumerate(samples):
        s = _check_level_map(s, f"samples[{i}]")
        if s.shape != (h, w):
            raise ValueError(
                f"samples[{i}] extent {s.shape} does not match samples[0] {(h, w)}"
            )
        np.add.at(counts, (s, *np.indices((h, w))), 1.0)
    probs = counts / float(len(samples))
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(probs > 0.0, np.log(probs), 0.0)
    ent = -(probs * logs).sum(axis=0)
    np.clip(ent, 0.0, np.log(N_LEVELS), out=ent)
    return ResidueDistributionMap(
        probabilities=probs.astype(np.float32),
        entropy=ent.astype(np.float32),
        sample_count=len(samples),
    )


def coverage_fractions(
    m: Union[np.ndarray, ResidueDistributionMap],
) -> np.ndarray:
    """Fraction of the tile occupied by each level.

    Hard maps count pixels; distribution maps take mean probability,
    which equals the expected pixel fraction.
    """
    if isinstance(m, ResidueDistributionMap):
        return m.probabilities.reshape(N_LEVELS, -1).mean(axis=1).astype(np.float64)
    m = _check_level_map(m, "map")
    return np.bincount(m.ravel(), minlength=N_LEVELS).astype(np.float64) / m.size


def iou(pred: np.ndarray, truth: np.ndarray, level: int) -> float:
    """Intersection over union of the class-`level` masks.

    Both masks empty counts as perfect agreement (IoU 1).
    """
    pred = _check_level_map(pred, "pred")
    truth = _check_level_map(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"extent mismatch: pred {pred.shape} vs truth {truth.shape}")
    if not 0 <= level < N_LEVELS:
        raise ValueError(f"level {level} outside [0, {N_LEVELS})")
    a = pred == level
    b = truth == level
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mean_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean IoU over the classes present in either map; absent classes skipped."""
    pred = _check_level_map(pred, "pred")
    truth = _check_level_map(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"extent mismatch: pred {pred.shape} vs truth {truth.shape}")
    present = np.union1d(np.unique(pred), np.unique(truth))
    vals = [iou(pred, truth, int(k)) for k in present]
    return float(np.mean(vals))


def _seg_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - mean_iou(a, b)


def _mean_pair_distance(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray]) -> float:
    total = 0.0
    for x in xs:
        for y in ys:
            if x is y:
                continue  # self-pair distance is 0 by definition, skip the work
            total += _seg_distance(x, y)
    return total / (len(xs) * len(ys))


def ged(samples_a: Sequence[np.ndarray], samples_b: Sequence[np.ndarray]) -> float:
    """Generalized energy distance (squared) between two sets of maps.

    GED^2 = 2 E[d(a,b)] - E[d(a,a')] - E[d(b,b')] with d = 1 - mean IoU.
    All terms are plug-in means over every ordered pair, so identical
    sets score exactly 0 and singleton sets have within-distance 0.
    """
    if len(samples_a) == 0 or len(samples_b) == 0:
        raise ValueError("ged requires non-empty sample sets")
    cross = _mean_pair_distance(samples_a, samples_b)
    within_a = _mean_pair_distance(samples_a, samples_a) if len(samples_a) > 1 else 0.0
    within_b = _mean_pair_distance(samples_b, samples_b) if len(samples_b) > 1 else 0.0
    return 2.0 * cross - within_a - within_b


def flag_risk(dist: ResidueDistributionMap, tau: float = 0.5) -> np.ndarray:
    """Mask pixels whose heavy-or-ponding probability reaches `tau`."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    p_risk = dist.probabilities[LEVEL_HEAVY] + dist.probabilities[LEVEL_PONDING]
    return p_risk >= tau


def build_metrics_report(
    samples: Sequence[np.ndarray],
    truth: np.ndarray,
    reference: Sequence[np.ndarray] = (),
) -> MetricsReport:
    """Score sampled maps against a truth map.

    Pixel accuracy and IoU are computed on the distribution argmax.
    GED compares the sample set against `reference` when given (for
    example a set of annotator maps), otherwise against the singleton
    truth.
    """
    dist = aggregate(samples)
    truth = _check_level_map(truth, "truth")
    if truth.shape != dist.probabilities.shape[1:]:
        raise ValueError("truth extent does not match samples")
    hard = dist.probabilities.argmax(axis=0)
    acc = float((hard == truth).mean())
    per_class = tuple(iou(hard, truth, k) for k in range(N_LEVELS))
    present = np.union1d(np.unique(hard), np.unique(truth))
    miou = float(np.mean([per_class[int(k)] for k in present]))
    ref = list(reference) if len(reference) else [truth]
    g = ged(list(samples), ref)
    return MetricsReport(
        pixel_accuracy=acc,
        class_iou=per_class,
        mean_iou=miou,
        ged=g,
        sample_count=len(samples),
    )
