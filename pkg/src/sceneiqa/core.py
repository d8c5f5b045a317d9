"""Scene-weighted quality score aggregation.

Pure, framework-free functions: scene-membership weighting, per-scene affine
rescaling, top-k selection, and the final weighted-average score. No learning
logic and no image handling here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence


class DegenerateInputError(ValueError):
    """Raised when an input carries no usable signal (all-zero weights, no patches)."""


@dataclass(frozen=True)
class SceneRegistry:
    """Ordered list of training-scene identifiers.

    The ordering defines the index `i` used by every probability vector and
    affine table, so it must be stable across save/load.
    """

    scene_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "scene_ids", tuple(self.scene_ids))
        if len(set(self.scene_ids)) != len(self.scene_ids):
            raise ValueError("scene ids must be unique")
        if any(not s for s in self.scene_ids):
            raise ValueError("scene ids must be non-empty")

    @property
    def count(self) -> int:
        return len(self.scene_ids)

    def index_of(self, scene_id: str) -> int:
        return self.scene_ids.index(scene_id)


@dataclass(frozen=True)
class ClassProbVector:
    """Scene-membership weights over the training scenes (softmax output)."""

    weights: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ValueError("weights must be non-negative and finite")

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class SceneAffineTable:
    """Per-scene multiplier/offset pairs mapping a raw score onto each scene's scale."""

    multipliers: tuple[float, ...]
    offsets: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(float(a) for a in self.multipliers))
        object.__setattr__(self, "offsets", tuple(float(b) for b in self.offsets))
        if len(self.multipliers) != len(self.offsets):
            raise ValueError("multipliers and offsets must have equal length")
        if any(not math.isfinite(v) for v in self.multipliers + self.offsets):
            raise ValueError("affine entries must be finite")

    def __len__(self) -> int:
        return len(self.multipliers)

    @classmethod
    def identity(cls, n: int) -> "SceneAffineTable":
        return cls((1.0,) * n, (0.0,) * n)


@dataclass(frozen=True)
class TopKPolicy:
    """How many of the most probable scenes participate in aggregation.

    k larger than the number of scenes is truncated at the use site, so one
    policy can serve registries of any size.
    """

    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class QualityPrediction:
    """Per-patch scores, their pooled raw score, and the final rescaled score."""

    patch_scores: tuple[float, ...]
    pre_quality: float
    final_score: float
    class_probs: ClassProbVector = field(repr=False)


def top_k_select(probs: ClassProbVector, policy: TopKPolicy) -> tuple[list[int], list[float]]:
    """Pick the k most probable scene indices and renormalize their weights.

    Ties break to the lower scene index so results are order-stable.
    Returns (indices, renormalized weights); the weights sum to 1.
    """
    w = probs.weights
    total = sum(w)
    if total <= 0.0:
        raise DegenerateInputError("all-zero probability vector")
    k = min(policy.k, len(w))
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    indices = order[:k]
    selected_sum = sum(w[i] for i in indices)
    if selected_sum <= 0.0:
        raise DegenerateInputError("selected top-k weights sum to zero")
    renorm = [w[i] / selected_sum for i in indices]
    return indices, renorm


def rescale_single_scene(pre_quality: float, scene_index: int, table: SceneAffineTable) -> float:
    """Map a raw quality score onto one scene's scale: a_i * q + b_i."""
    if not 0 <= scene_index < len(table):
        raise IndexError(f"scene index {scene_index} out of range for table of size {len(table)}")
    return table.multipliers[scene_index] * pre_quality + table.offsets[scene_index]


def aggregate_quality(
    pre_quality: float,
    probs: ClassProbVector,
    table: SceneAffineTable,
    policy: TopKPolicy,
) -> float:
    """Final score: weighted average of per-scene rescaled scores over the top-k scenes.

    With a one-hot probability vector this reduces exactly to
    rescale_single_scene on the hot index.
    """
    if len(probs) != len(table):
        raise ValueError("probability vector and affine table sizes differ")
    indices, weights = top_k_select(probs, policy)
    return sum(
        w * rescale_single_scene(pre_quality, i, table) for i, w in zip(indices, weights)
    )


def aggregate_image_from_patches(
    patch_scores: Sequence[float],
    probs: ClassProbVector,
    table: SceneAffineTable,
    policy: TopKPolicy,
) -> QualityPrediction:
    """Pool patch scores by arithmetic mean, then aggregate over scenes."""
    scores = tuple(float(s) for s in patch_scores)
    if not scores:
        raise DegenerateInputError("no patch scores")
    pre_quality = sum(scores) / len(scores)
    final = aggregate_quality(pre_quality, probs, table, policy)
    return QualityPrediction(
        patch_scores=scores,
        pre_quality=pre_quality,
        final_score=final,
        class_probs=probs,
    )
