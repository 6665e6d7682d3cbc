"""
Synthetic long-tailed multi-view RoI data.

Classes get Gaussian prototypes, instances scatter around their class
prototype and every view scatters around its instance. A view is occluded
with probability `occlusion_prob`, in which case its feature is replaced by a
fresh view of some other instance. Instance counts per class follow a Zipf
profile, so single views are information-limited while whole tracklets are
not.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.augment import RoiPool

logger = logging.getLogger(__name__)

RARE_THRESHOLD = 10
FREQUENT_THRESHOLD = 100


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = Field(50, ge=2)
    feature_dim: int = Field(32, ge=1)
    zipf_exponent: float = Field(1.5, ge=0)
    total_instances: int = Field(2000, ge=1)
    views_per_instance: int = Field(24, ge=1)
    view_noise_sigma: float = Field(0.5, ge=0)
    occlusion_prob: float = Field(0.3, ge=0, le=1)
    prototype_sigma: float = Field(1.0, ge=0)
    instance_sigma: float = Field(0.25, ge=0)
    test_instances_per_class: int = Field(2, ge=1)
    proposals_per_view: int = Field(1, ge=1)
    proposal_box_jitter: float = Field(0.1, ge=0)
    proposal_feature_sigma: float = Field(0.1, ge=0)
    image_width: float = Field(640.0, gt=0)
    image_height: float = Field(480.0, gt=0)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    # pools with different splits share the class prototypes but not the instances
    split: int = Field(0, ge=0)


@dataclass(frozen=True)
class FrequencyGroups:
    rare: FrozenSet[int]
    common: FrozenSet[int]
    frequent: FrozenSet[int]

    def group_of(self, category: int) -> str:
        if category in self.rare:
            return "rare"
        if category in self.common:
            return "common"
        if category in self.frequent:
            return "frequent"
        return "unseen"

    def to_dict(self) -> Dict[str, List[int]]:
        return {name: sorted(getattr(self, name)) for name in ("rare", "common", "frequent")}


@dataclass(eq=False)
class LabeledTracklet:
    """A ground-truth test tracklet: all views of one instance."""

    views: np.ndarray
    label: int
    identity: int
    boxes: np.ndarray = field(default=None)

    def to_json(self) -> dict:
        return {"views": self.views.tolist(), "label": int(self.label), "identity": int(self.identity)}


@dataclass(eq=False)
class SynthDataset:
    train_pool: RoiPool
    test_tracklets: List[LabeledTracklet]
    instance_counts: Dict[int, int]
    prototypes: np.ndarray
    config: SynthConfig

    @property
    def groups(self) -> FrequencyGroups:
        return frequency_groups(self.instance_counts)

    def manifest(self) -> dict:
        return {
            "config": self.config.model_dump(),
            "instance_counts": {str(c): n for c, n in sorted(self.instance_counts.items())},
            "class_counts": {str(c): n for c, n in sorted(self.train_pool.class_counts.items())},
            "groups": self.groups.to_dict(),
            "num_train_records": len(self.train_pool),
            "num_test_tracklets": len(self.test_tracklets),
        }


def frequency_groups(class_counts: Mapping[int, int]) -> FrequencyGroups:
    """rare < 10 <= common < 100 <= frequent; classes with count 0 are left out."""
    rare, common, frequent = set(), set(), set()
    for c, n in class_counts.items():
        if n < 0:
            raise ValueError(f"Negative count {n} for class {c}")
        if n == 0:
            continue
        if n < RARE_THRESHOLD:
            rare.add(int(c))
        elif n < FREQUENT_THRESHOLD:
            common.add(int(c))
        else:
            frequent.add(int(c))
    return FrequencyGroups(frozenset(rare), frozenset(common), frozenset(frequent))


def zipf_instance_counts(num_classes: int, exponent: float, total: int) -> Dict[int, int]:
    """
    Largest-remainder rounding of `total` over shares proportional to
    rank^(-exponent); class c has rank c + 1. Remainder ties go to the lower rank.
    """
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    shares = ranks ** (-float(exponent))
    quotas = total * shares / shares.sum()
    counts = np.floor(quotas).astype(np.int64)
    leftover = int(total - counts.sum())
    order = np.lexsort((np.arange(num_classes), -(quotas - counts)))
    counts[order[:leftover]] += 1
    if counts.min() < 1:
        starved = [int(c) for c in np.flatnonzero(counts < 1)]
        raise ValueError(f"Budget of {total} instances leaves classes {starved} without any instance")
    return {c: int(n) for c, n in enumerate(counts)}


@dataclass
class _Instances:
    centers: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray


def _draw_instances(cfg: SynthConfig, prototypes: np.ndarray, per_class: Mapping[int, int], streams) -> _Instances:
    centers, labels, boxes = [], [], []
    for c in range(cfg.num_classes):
        n = per_class.get(c, 0)
        if n == 0:
            continue
        rng = streams[c]
        centers.append(prototypes[c] + rng.normal(0.0, cfg.instance_sigma, size=(n, cfg.feature_dim)))
        labels.append(np.full(n, c, dtype=np.int64))
        w = rng.uniform(32.0, 0.5 * cfg.image_width, size=n)
        h = rng.uniform(32.0, 0.5 * cfg.image_height, size=n)
        x1 = rng.uniform(0.0, cfg.image_width - w)
        y1 = rng.uniform(0.0, cfg.image_height - h)
        boxes.append(np.stack([x1, y1, x1 + w, y1 + h], axis=1))
    return _Instances(np.concatenate(centers), np.concatenate(labels), np.concatenate(boxes))


def _draw_views(cfg: SynthConfig, instances: _Instances, rng: np.random.Generator) -> np.ndarray:
    """[n_instances, views, d] view features with occluders swapped in."""
    n, v, d = instances.centers.shape[0], cfg.views_per_instance, cfg.feature_dim
    views = instances.centers[:, None, :] + rng.normal(0.0, cfg.view_noise_sigma, size=(n, v, d))
    if cfg.occlusion_prob <= 0:
        return views
    if n < 2:
        logger.warning("Only one instance in split; occlusion skipped")
        return views
    occluded = rng.random((n, v)) < cfg.occlusion_prob
    owners, slots = np.nonzero(occluded)
    # Uniform over the other n - 1 instances: never the occluded view's own.
    others = rng.integers(0, n - 1, size=owners.shape[0])
    others = others + (others >= owners)
    views[owners, slots] = instances.centers[others] + rng.normal(0.0, cfg.view_noise_sigma, size=(owners.shape[0], d))
    return views


def _jitter_boxes(boxes: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    scale = np.stack([w, h, w, h], axis=-1)
    jittered = boxes + fraction * scale * rng.uniform(-1.0, 1.0, size=boxes.shape)
    # keep at least a quarter of the original extent
    jittered[..., 2] = np.maximum(jittered[..., 2], jittered[..., 0] + 0.25 * w)
    jittered[..., 3] = np.maximum(jittered[..., 3], jittered[..., 1] + 0.25 * h)
    return jittered


def _build_pool(cfg: SynthConfig, instances: _Instances, views: np.ndarray, rng: np.random.Generator) -> RoiPool:
    n, v, d = views.shape
    k = cfg.proposals_per_view
    features = np.repeat(views[:, :, None, :], k, axis=2)
    boxes = np.repeat(np.repeat(instances.boxes[:, None, None, :], v, axis=1), k, axis=2)
    if k > 1:
        # slot 0 is the annotated box itself, the rest are jittered proposals
        features[:, :, 1:] += rng.normal(0.0, cfg.proposal_feature_sigma, size=(n, v, k - 1, d))
        boxes[:, :, 1:] = _jitter_boxes(boxes[:, :, 1:], cfg.proposal_box_jitter, rng)

    identities = np.repeat(np.arange(n), v * k)
    frames = np.tile(np.repeat(np.arange(v), k), n)
    annotations = np.bincount(instances.labels, minlength=cfg.num_classes) * v
    return RoiPool(
        features=features.reshape(-1, d),
        boxes=boxes.reshape(-1, 4),
        categories=np.repeat(instances.labels, v * k),
        identities=identities,
        frames=frames,
        sources=[f"video{i:05d}" for i in identities],
        class_counts={c: int(a) for c, a in enumerate(annotations) if a > 0},
        num_classes=cfg.num_classes,
    )


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """Draw the train RoI pool and the labeled test tracklets for `cfg`."""
    instance_counts = zipf_instance_counts(cfg.num_classes, cfg.zipf_exponent, cfg.total_instances)
    proto_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    children = np.random.SeedSequence([cfg.seed, cfg.split + 1]).spawn(2 * cfg.num_classes + 3)
    streams = [np.random.default_rng(s) for s in children]
    class_streams = streams[: cfg.num_classes]
    test_streams = streams[cfg.num_classes: 2 * cfg.num_classes]
    train_rng, test_rng, proposal_rng = streams[2 * cfg.num_classes:]

    prototypes = proto_rng.normal(0.0, cfg.prototype_sigma, size=(cfg.num_classes, cfg.feature_dim))

    train = _draw_instances(cfg, prototypes, instance_counts, class_streams)
    train_views = _draw_views(cfg, train, train_rng)
    pool = _build_pool(cfg, train, train_views, proposal_rng)

    test_counts = {c: cfg.test_instances_per_class for c in range(cfg.num_classes)}
    test = _draw_instances(cfg, prototypes, test_counts, test_streams)
    test_views = _draw_views(cfg, test, test_rng)
    offset = train.centers.shape[0]
    test_tracklets = [
        LabeledTracklet(
            views=test_views[i],
            label=int(test.labels[i]),
            identity=offset + i,
            boxes=np.repeat(test.boxes[i][None, :], cfg.views_per_instance, axis=0),
        )
        for i in range(test.centers.shape[0])
    ]
    logger.info(
        f"Generated synthetic data: {len(pool)} train records over {offset} instances, "
        f"{len(test_tracklets)} test tracklets"
    )
    return SynthDataset(
        train_pool=pool,
        test_tracklets=test_tracklets,
        instance_counts=instance_counts,
        prototypes=prototypes,
        config=cfg,
    )
