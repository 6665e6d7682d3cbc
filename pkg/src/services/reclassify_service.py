"""
Re-labels tracker output: each tracklet's views go through the set classifier
and the class probabilities c are fused with the tracker confidence s as
c^lambda_c * s^lambda_s, multiplied by the tracklet length when the length
penalty is on. Boxes, identities and membership pass through untouched.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.core.checkpoint import load_checkpoint
from src.core.diffcore import ShapeError
from src.core.set_classifier import SetClassifierModel
from src.services.evaluation_service import predict_probs

logger = logging.getLogger(__name__)


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_c: float = Field(1.0 / 3.0, ge=0)
    lambda_s: float = Field(2.0 / 3.0, ge=0)
    length_penalty: bool = True
    # fuse only the top class probability instead of the full vector
    scalar_class_score: bool = False


class PredictedTracklet(BaseModel):
    model_config = ConfigDict(extra="forbid")

    views: List[List[float]]
    tracker_score: Union[float, List[float]]
    length: Optional[int] = Field(None, ge=1)
    track_id: Optional[Union[int, str]] = None
    boxes: Optional[List[List[float]]] = None
    frames: Optional[List[int]] = None

    @field_validator("views")
    @classmethod
    def _check_views(cls, views):
        if not views:
            raise ValueError("Tracklet has no views")
        if len({len(v) for v in views}) != 1:
            raise ValueError("Views have differing feature widths")
        return views

    @field_validator("tracker_score")
    @classmethod
    def _check_score(cls, score):
        values = score if isinstance(score, list) else [score]
        if not values or any(not 0.0 <= s <= 1.0 for s in values):
            raise ValueError(f"Tracker scores must lie in [0, 1], got {score}")
        return score

    @model_validator(mode="after")
    def _default_length(self):
        if self.length is None:
            self.length = len(self.views)
        return self

    def features(self) -> np.ndarray:
        return np.asarray(self.views, dtype=np.float64)


@dataclass
class ReclassifiedTracklet:
    label: int
    scores: np.ndarray
    set_probs: np.ndarray
    source: PredictedTracklet

    def to_json(self) -> Dict[str, Any]:
        row = {
            "label": self.label,
            "scores": self.scores.tolist(),
            "set_probs": self.set_probs.tolist(),
            "tracker_score": self.source.tracker_score,
            "length": self.source.length,
        }
        for key in ("track_id", "boxes", "frames"):
            value = getattr(self.source, key)
            if value is not None:
                row[key] = value
        return row


def fuse_scores(set_probs, tracker_score, length: int, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Per class c_k^lambda_c * s^lambda_s (s scalar or per class), times L if length_penalty."""
    c = np.asarray(set_probs, dtype=np.float64)
    s = np.asarray(tracker_score, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ShapeError(f"Set probabilities must be a non-empty vector, got shape {c.shape}")
    if s.ndim > 1 or (s.ndim == 1 and s.shape != c.shape):
        raise ShapeError(f"Tracker score shape {s.shape} does not match {c.shape}")
    if np.any(c < 0) or np.any(s < 0):
        raise ValueError("Scores must be non-negative")
    if np.any(s > 1):
        raise ValueError(f"Tracker score must lie in [0, 1], got {tracker_score}")
    if length < 1:
        raise ValueError(f"Tracklet length must be at least 1, got {length}")

    if cfg.scalar_class_score:
        top = int(np.argmax(c))
        class_term = np.zeros_like(c)
        class_term[top] = c[top] ** cfg.lambda_c
    else:
        class_term = c ** cfg.lambda_c
    fused = class_term * s ** cfg.lambda_s
    return fused * float(length) if cfg.length_penalty else fused


def _resolve_model(model: Union[SetClassifierModel, str, Path]) -> SetClassifierModel:
    return model if isinstance(model, SetClassifierModel) else load_checkpoint(model)


def reclassify(
    tracklets: Sequence[PredictedTracklet],
    model: Union[SetClassifierModel, str, Path],
    cfg: FusionConfig = FusionConfig(),
    workers: int = 1,
) -> List[ReclassifiedTracklet]:
    """Fused class scores and argmax label per tracklet; tracklets longer than max_length are subsampled."""
    model = _resolve_model(model)
    width = model.config.input_dim
    for i, t in enumerate(tracklets):
        if len(t.views[0]) != width:
            raise ShapeError(f"Tracklet {i}: feature width {len(t.views[0])} does not match model input_dim {width}")

    probs = predict_probs(model, [t.features() for t in tracklets], workers)
    results = []
    for t, c in zip(tracklets, probs):
        scores = fuse_scores(c, t.tracker_score, t.length, cfg)
        results.append(ReclassifiedTracklet(label=int(np.argmax(scores)), scores=scores, set_probs=c, source=t))
    logger.info(f"Reclassified {len(results)} tracklets")
    return results
