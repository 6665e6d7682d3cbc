"""
Training losses of the set classifier.

    set loss      soft-label cross-entropy on the set logits
    instance loss one-hot cross-entropy of every encoded RoI token
    cluster loss  one-hot cross-entropy of the pre-encoder tokens plus
                  KL(p_l || Q_l), Q_l the mean distribution of the tokens
                  sharing l's identity

Per-token losses are weighted means over tokens; `row_weights` lets a batch
of packed tracklets weight each row by 1 / (B * L_b).
"""
import logging
from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.diffcore import (
    ShapeError,
    Tensor,
    add,
    log,
    log_softmax,
    mean,
    mul,
    segment_mean,
    softmax,
    sub,
    take,
    tensor_sum,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    w_sc: float = Field(0.05, ge=0)
    w_ins: float = Field(0.02, ge=0)
    w_cluster: float = Field(0.1, ge=0)


@dataclass(frozen=True)
class LossReport:
    l_sc: float
    l_ins: float
    l_cluster: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _one_hot(categories: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    if categories.size and (categories.min() < 0 or categories.max() >= num_classes):
        raise ValueError(f"Category out of range [0, {num_classes}): {categories.min()}..{categories.max()}")
    return np.eye(num_classes, dtype=dtype)[categories]


def _row_weights(row_weights: Optional[Sequence[float]], rows: int, dtype) -> np.ndarray:
    if row_weights is None:
        return np.full(rows, 1.0 / rows, dtype=dtype)
    weights = np.asarray(row_weights, dtype=dtype)
    if weights.shape != (rows,):
        raise ShapeError(f"Expected {rows} row weights, got shape {weights.shape}")
    return weights


def _cross_entropy_rows(categories: np.ndarray, logits: Tensor) -> Tensor:
    target = _one_hot(categories, logits.shape[-1], logits.dtype)
    return mul(tensor_sum(mul(log_softmax(logits), Tensor(target)), axis=-1), -1.0)


def set_loss(soft_label, set_logits: Tensor) -> Tensor:
    """
    L_SC = -sum_c y_c log softmax(y_hat)_c. Accepts one tracklet ([C]) or a
    batch ([B, C]), in which case the mean over tracklets is returned.
    """
    y = np.asarray(soft_label, dtype=set_logits.dtype)
    if y.shape != set_logits.shape:
        raise ShapeError(f"Soft label shape {y.shape} does not match logits {set_logits.shape}")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("Soft label must be a probability distribution")
    per_row = mul(tensor_sum(mul(log_softmax(set_logits), Tensor(y)), axis=-1), -1.0)
    return per_row if per_row.ndim == 0 else mean(per_row)


def instance_loss(categories: Sequence[int], instance_logits: Tensor, row_weights=None) -> Tensor:
    categories = np.asarray(categories, dtype=np.int64)
    if instance_logits.ndim != 2 or categories.shape != (instance_logits.shape[0],):
        raise ShapeError(f"{categories.shape[0]} categories for logits of shape {instance_logits.shape}")
    if categories.size == 0:
        raise ShapeError("instance_loss needs at least one token")
    weights = _row_weights(row_weights, categories.size, instance_logits.dtype)
    return tensor_sum(mul(_cross_entropy_rows(categories, instance_logits), Tensor(weights)))


def cluster_kl(identities: Sequence, cluster_logits: Tensor) -> Tensor:
    """Per-token KL(p_l || Q_l), Q_l the mean of p_k over tokens with i_k == i_l."""
    _, first_rows, segments = np.unique(np.asarray(identities), axis=0, return_index=True, return_inverse=True)
    segments = segments.reshape(-1)
    num_segments = first_rows.shape[0]
    probs = softmax(cluster_logits)

    # Centre each group on its first member so identical members give Q == p exactly.
    anchor_probs = take(probs, first_rows[segments])
    offsets = segment_mean(sub(probs, anchor_probs), segments, num_segments)
    centroid = add(anchor_probs, take(offsets, segments))

    log_ratio = sub(log(probs, PROB_FLOOR), log(centroid, PROB_FLOOR))
    return tensor_sum(mul(probs, log_ratio), axis=-1)


def cluster_loss(categories: Sequence[int], identities: Sequence, cluster_logits: Tensor, row_weights=None) -> Tensor:
    categories = np.asarray(categories, dtype=np.int64)
    identities = np.asarray(identities)
    if cluster_logits.ndim != 2:
        raise ShapeError(f"cluster logits must be [L, C], got {cluster_logits.shape}")
    rows = cluster_logits.shape[0]
    if categories.shape[0] != rows or identities.shape[0] != rows:
        raise ShapeError(f"{categories.shape[0]} categories / {identities.shape[0]} identities for {rows} logit rows")
    if rows == 0:
        raise ShapeError("cluster_loss needs at least one token")
    weights = _row_weights(row_weights, rows, cluster_logits.dtype)
    per_token = add(_cross_entropy_rows(categories, cluster_logits), cluster_kl(identities, cluster_logits))
    return tensor_sum(mul(per_token, Tensor(weights)))


def total_loss(l_sc: float, l_ins: float, l_cluster: float, weights: LossWeights) -> LossReport:
    total = weights.w_sc * l_sc + weights.w_ins * l_ins + weights.w_cluster * l_cluster
    return LossReport(l_sc=float(l_sc), l_ins=float(l_ins), l_cluster=float(l_cluster), total=float(total))


def combine_losses(l_sc: Tensor, l_ins: Tensor, l_cluster: Tensor, weights: LossWeights) -> Tuple[Tensor, LossReport]:
    """Weighted sum as a differentiable scalar, plus its LossReport."""
    combined = add(add(mul(l_sc, weights.w_sc), mul(l_ins, weights.w_ins)), mul(l_cluster, weights.w_cluster))
    return combined, total_loss(l_sc.item(), l_ins.item(), l_cluster.item(), weights)
