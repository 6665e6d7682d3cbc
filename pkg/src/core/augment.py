"""
Tracklet generation from pooled RoI records.

Records are drawn i.i.d. with replacement under a tail-favoring multinomial,
p'_k proportional to n_{c_k}^(-p), optionally restricted to the first draw's
identity or class, and every tracklet carries a soft label equal to the class
proportions of its items.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)


class EmptyPoolError(ValueError):
    pass


class MissingClassCountError(KeyError):
    pass


class EmptyCandidateSetError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RoiRecord:
    """One region proposal matched to a ground-truth box: B_k = (b_k, c_k, i_k)."""

    feature: np.ndarray
    box: Tuple[float, float, float, float]
    category: int
    identity: int
    frame: int = 0
    source: str = ""

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"Degenerate box {self.box}")
        if self.category < 0:
            raise ValueError(f"Category must be non-negative, got {self.category}")
        if self.identity < 0:
            raise ValueError(f"Identity must be non-negative, got {self.identity}")


@dataclass(eq=False)
class RoiPool:
    """
    Columnar store of RoI records plus the per-class annotation counts n_c
    used for resampling. n_c counts ground-truth annotations, not records.
    """

    features: np.ndarray
    boxes: np.ndarray
    categories: np.ndarray
    identities: np.ndarray
    frames: np.ndarray
    sources: List[str]
    class_counts: Dict[int, int]
    num_classes: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.categories = np.asarray(self.categories, dtype=np.int64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        n = self.categories.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be [N, d_in] with N={n}, got {self.features.shape}")
        for name in ("boxes", "identities", "frames"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if len(self.sources) != n:
            raise ValueError(f"sources has {len(self.sources)} entries, expected {n}")
        self.class_counts = {int(k): int(v) for k, v in self.class_counts.items()}
        known = [self.num_classes, max(self.class_counts, default=-1) + 1]
        if n:
            known.append(int(self.categories.max()) + 1)
        self.num_classes = max(known)

    @classmethod
    def from_records(cls, records: Sequence[RoiRecord], class_counts: Mapping[int, int], num_classes: int = 0) -> "RoiPool":
        if records:
            features = np.stack([np.asarray(r.feature, dtype=np.float64) for r in records])
        else:
            features = np.zeros((0, 0))
        return cls(
            features=features,
            boxes=np.array([r.box for r in records], dtype=np.float64).reshape(-1, 4),
            categories=np.array([r.category for r in records], dtype=np.int64),
            identities=np.array([r.identity for r in records], dtype=np.int64),
            frames=np.array([r.frame for r in records], dtype=np.int64),
            sources=[r.source for r in records],
            class_counts=dict(class_counts),
            num_classes=num_classes,
        )

    def __len__(self) -> int:
        return int(self.categories.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def record(self, index: int) -> RoiRecord:
        return RoiRecord(
            feature=self.features[index],
            box=tuple(float(v) for v in self.boxes[index]),
            category=int(self.categories[index]),
            identity=int(self.identities[index]),
            frame=int(self.frames[index]),
            source=self.sources[index],
        )

    @cached_property
    def identity_index(self) -> Dict[int, np.ndarray]:
        return _group_rows(self.identities)

    @cached_property
    def category_index(self) -> Dict[int, np.ndarray]:
        return _group_rows(self.categories)


def _group_rows(keys: np.ndarray) -> Dict[int, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    unique, starts = np.unique(keys[order], return_index=True)
    return {int(k): rows for k, rows in zip(unique, np.split(order, starts[1:]))}


@dataclass(frozen=True, eq=False)
class Tracklet:
    """Ordered RoI items plus their soft label y (class proportions)."""

    items: Tuple[RoiRecord, ...]
    soft_label: np.ndarray
    indices: Tuple[int, ...] = field(default=())

    @property
    def length(self) -> int:
        return len(self.items)

    @property
    def features(self) -> np.ndarray:
        return np.stack([r.feature for r in self.items])

    @property
    def categories(self) -> np.ndarray:
        return np.array([r.category for r in self.items], dtype=np.int64)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.items], dtype=np.int64)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    exponent: float = Field(0.5, ge=0)
    length_min: int = Field(16, ge=1)
    length_max_exclusive: int = 32
    tracklets_per_batch: int = Field(256, ge=1)
    allow_multi_identity: bool = True
    allow_multi_class: bool = True
    seed: int = Field(0, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.length_max_exclusive <= self.length_min:
            raise ValueError(
                f"length_max_exclusive ({self.length_max_exclusive}) must exceed length_min ({self.length_min})"
            )
        return self


def sampling_probs(pool: RoiPool, exponent: float) -> np.ndarray:
    """p'_k = n_{c_k}^(-p) / sum_j n_{c_j}^(-p) over the records of `pool`."""
    if len(pool) == 0:
        raise EmptyPoolError("Cannot sample from an empty RoI pool")
    if exponent < 0:
        raise ValueError(f"Sampling exponent must be non-negative, got {exponent}")
    present = np.unique(pool.categories)
    missing = [int(c) for c in present if pool.class_counts.get(int(c), 0) < 1]
    if missing:
        raise MissingClassCountError(f"No annotation count for classes {missing}")
    lookup = np.zeros(int(present.max()) + 1, dtype=np.float64)
    for c in present:
        lookup[c] = pool.class_counts[int(c)]
    raw = lookup[pool.categories] ** (-float(exponent))
    return raw / raw.sum()


def _soft_label_from_categories(categories: np.ndarray, num_classes: int) -> np.ndarray:
    categories = np.asarray(categories, dtype=np.int64)
    if categories.size == 0:
        raise ValueError("Soft label needs at least one item")
    if categories.min() < 0 or categories.max() >= num_classes:
        raise ValueError(f"Category out of range [0, {num_classes}): {categories.min()}..{categories.max()}")
    return np.bincount(categories, minlength=num_classes) / float(categories.size)


def soft_label(items: Sequence[RoiRecord], num_classes: int) -> np.ndarray:
    """y_c = (#items of class c) / L."""
    return _soft_label_from_categories(np.array([r.category for r in items], dtype=np.int64), num_classes)


def concat_pools(pools: Sequence[RoiPool]) -> Tuple[RoiPool, np.ndarray]:
    """
    Merge pools into one, shifting identities so no two pools share one.
    Returns the merged pool and, per record, the index of its source pool.
    """
    if not pools:
        raise EmptyPoolError("No pools to merge")
    offset = 0
    identities, origin = [], []
    counts: Dict[int, int] = {}
    for i, pool in enumerate(pools):
        identities.append(pool.identities + offset)
        if len(pool):
            offset += int(pool.identities.max()) + 1
        origin.append(np.full(len(pool), i, dtype=np.int64))
        for c, n in pool.class_counts.items():
            counts[c] = counts.get(c, 0) + n
    merged = RoiPool(
        features=np.concatenate([p.features for p in pools]),
        boxes=np.concatenate([p.boxes for p in pools]),
        categories=np.concatenate([p.categories for p in pools]),
        identities=np.concatenate(identities),
        frames=np.concatenate([p.frames for p in pools]),
        sources=[s for p in pools for s in p.sources],
        class_counts=counts,
        num_classes=max(p.num_classes for p in pools),
    )
    return merged, np.concatenate(origin)


def mixture_probs(pools: Sequence[RoiPool], ratios: Sequence[float], exponent: float) -> np.ndarray:
    """Record probabilities of the merged pool: each pool's own p'_k scaled by its share of `ratios`."""
    if len(pools) != len(ratios):
        raise ValueError(f"{len(pools)} pools but {len(ratios)} ratios")
    weights = np.asarray(ratios, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError(f"Pool ratios must be non-negative with a positive sum, got {list(ratios)}")
    weights = weights / weights.sum()
    parts = []
    for pool, w in zip(pools, weights):
        parts.append(w * sampling_probs(pool, exponent) if len(pool) else np.zeros(0))
    probs = np.concatenate(parts)
    return probs / probs.sum()


class TrackletGenerator:
    """Draws tracklets from one pool, reusing the cumulative distribution across calls."""

    def __init__(self, pool: RoiPool, config: SamplerConfig, probs: Optional[np.ndarray] = None):
        if len(pool) == 0:
            raise EmptyPoolError("Cannot generate tracklets from an empty RoI pool")
        self.pool = pool
        self.config = config
        self.probs = sampling_probs(pool, config.exponent) if probs is None else np.asarray(probs, dtype=np.float64)
        if self.probs.shape != (len(pool),):
            raise ValueError(f"Expected {len(pool)} record probabilities, got {self.probs.shape}")
        self.cdf = np.cumsum(self.probs)

    @staticmethod
    def _draw(cdf: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        picks = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
        return np.minimum(picks, cdf.shape[0] - 1)

    def draw_records(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """`count` i.i.d. record indices under the sampling distribution."""
        return self._draw(self.cdf, rng, count)

    def _candidates(self, first: int) -> Optional[np.ndarray]:
        if not self.config.allow_multi_identity:
            rows = self.pool.identity_index[int(self.pool.identities[first])]
            if not self.config.allow_multi_class:
                rows = rows[self.pool.categories[rows] == self.pool.categories[first]]
            return rows
        if not self.config.allow_multi_class:
            return self.pool.category_index[int(self.pool.categories[first])]
        return None

    def generate_tracklet(self, rng: np.random.Generator) -> Tracklet:
        cfg = self.config
        length = int(rng.integers(cfg.length_min, cfg.length_max_exclusive))
        first = int(self._draw(self.cdf, rng, 1)[0])
        candidates = self._candidates(first)
        if candidates is None:
            rest = self._draw(self.cdf, rng, length - 1)
        else:
            weights = self.probs[candidates]
            if candidates.size == 0 or weights.sum() <= 0:
                raise EmptyCandidateSetError(f"No candidates left after restricting to record {first}")
            rest = candidates[self._draw(np.cumsum(weights), rng, length - 1)]
        indices = np.concatenate([[first], rest]).astype(np.int64)
        items = tuple(self.pool.record(int(i)) for i in indices)
        label = _soft_label_from_categories(self.pool.categories[indices], self.pool.num_classes)
        return Tracklet(items=items, soft_label=label, indices=tuple(int(i) for i in indices))

    def generate_batch(self, rng: np.random.Generator) -> List[Tracklet]:
        return [self.generate_tracklet(rng) for _ in range(self.config.tracklets_per_batch)]


def generate_tracklet(pool: RoiPool, cfg: SamplerConfig, rng: np.random.Generator) -> Tracklet:
    return TrackletGenerator(pool, cfg).generate_tracklet(rng)


def generate_batch(pool: RoiPool, cfg: SamplerConfig, rng: np.random.Generator) -> List[Tracklet]:
    return TrackletGenerator(pool, cfg).generate_batch(rng)


def class_marginal(pool: RoiPool, probs: np.ndarray) -> np.ndarray:
    """Aggregate record probabilities by class."""
    return np.bincount(pool.categories, weights=probs, minlength=pool.num_classes)


def sample_stats(pool: RoiPool, exponent: float, draws: int, rng: np.random.Generator) -> Dict[str, object]:
    """Empirical frequencies of `draws` i.i.d. record draws against the analytic distribution."""
    generator = TrackletGenerator(pool, SamplerConfig(exponent=exponent))
    picks = generator.draw_records(draws, rng)
    empirical = np.bincount(picks, minlength=len(pool)) / float(draws)
    analytic = generator.probs
    class_analytic = class_marginal(pool, analytic)
    class_empirical = class_marginal(pool, empirical)
    rarest = min(pool.class_counts[int(c)] for c in np.unique(pool.categories))
    rare_classes = [c for c, n in pool.class_counts.items() if n == rarest]
    return {
        "exponent": float(exponent),
        "draws": int(draws),
        "record_l1": float(np.abs(empirical - analytic).sum()),
        "class_l1": float(np.abs(class_empirical - class_analytic).sum()),
        "rarest_class_mass": float(class_analytic[rare_classes].sum()),
        "class_analytic": class_analytic.tolist(),
        "class_empirical": class_empirical.tolist(),
    }
