"""Per-view classifier used as the aggregation baseline."""
import logging
from typing import List, Optional

import numpy as np

from src.core.diffcore import Parameter, Tensor, softmax
from src.core.set_classifier import PRECISIONS, EmbeddingHead, Linear, SetClassifierConfig

logger = logging.getLogger(__name__)


class PerFrameClassifier:
    """The set classifier's embedding head followed by one linear layer, applied to each view alone."""

    def __init__(self, config: SetClassifierConfig, seed: int = 0, rng: Optional[np.random.Generator] = None,
                 precision: str = "float64"):
        self.config = config
        self.dtype = PRECISIONS[precision]
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.embedding = EmbeddingHead("embed", config.input_dim, config.model_dim, rng, self.dtype)
        self.head = Linear("view_head", config.model_dim, config.num_classes, rng, self.dtype)

    def parameters(self) -> List[Parameter]:
        return self.embedding.parameters() + self.head.parameters()

    def logits(self, views: np.ndarray) -> Tensor:
        return self.head(self.embedding(Tensor(np.asarray(views, dtype=self.dtype))))

    def view_probs(self, views: np.ndarray) -> np.ndarray:
        return softmax(self.logits(views)).data


def predict_by_averaging(view_probs: np.ndarray) -> int:
    """argmax of the mean per-view distribution; ties go to the lowest class."""
    return int(np.argmax(np.asarray(view_probs).mean(axis=0)))


def predict_by_majority(view_probs: np.ndarray) -> int:
    """Most frequent per-view argmax; ties go to the lowest class."""
    view_probs = np.asarray(view_probs)
    votes = np.bincount(np.argmax(view_probs, axis=1), minlength=view_probs.shape[1])
    return int(np.argmax(votes))
