"""
Per-frame baseline: classify every view on its own, then aggregate over the
tracklet by averaging the per-view distributions or by majority vote.

The classifier shares the set classifier's embedding head and trains for the
same number of iterations, each on as many RoIs as an average set-classifier
batch holds, drawn under the same tail-favoring distribution.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core.augment import RoiPool, TrackletGenerator
from src.core.diffcore import NonFiniteError, backward, create_optimizer_state, optimizer_step, zero_grad
from src.core.losses import instance_loss
from src.core.perframe import PerFrameClassifier, predict_by_averaging, predict_by_majority
from src.core.synthdata import FrequencyGroups, LabeledTracklet
from src.services.evaluation_service import EvaluationReport, accuracy_report
from src.services.training_service import TrainConfig, TrainingDivergedError, training_streams

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    averaging: EvaluationReport
    majority: EvaluationReport
    model: PerFrameClassifier
    losses: List[float]

    def to_dict(self) -> dict:
        return {"averaging": self.averaging.to_dict(), "majority": self.majority.to_dict()}


def records_per_batch(cfg: TrainConfig) -> int:
    sampler = cfg.sampler
    mean_length = (sampler.length_min + sampler.length_max_exclusive - 1) / 2.0
    return max(1, int(round(sampler.tracklets_per_batch * mean_length)))


def train_perframe(pool: RoiPool, cfg: TrainConfig) -> Tuple[PerFrameClassifier, List[float]]:
    generator = TrackletGenerator(pool, cfg.sampler)
    init_rng, sample_rng = training_streams(cfg.seed, cfg.sampler.seed)
    model_cfg = cfg.model.build(pool.input_dim, pool.num_classes)
    model = PerFrameClassifier(model_cfg, rng=init_rng, precision=cfg.precision)
    params = model.parameters()
    state = create_optimizer_state(params, cfg.optimizer.rule, **cfg.optimizer.settings())
    batch_size = records_per_batch(cfg)
    losses = []
    logger.info(f"Training per-frame baseline: {cfg.iterations} iterations of {batch_size} RoIs")

    for iteration in range(1, cfg.iterations + 1):
        rows = generator.draw_records(batch_size, sample_rng)
        try:
            loss = instance_loss(pool.categories[rows], model.logits(pool.features[rows]))
            zero_grad(params)
            backward(loss, params)
        except NonFiniteError as e:
            logger.error(f"Baseline training diverged at iteration {iteration}: {str(e)}")
            raise TrainingDivergedError(f"Non-finite baseline loss at iteration {iteration}") from e
        optimizer_step(state, params)
        losses.append(loss.item())
        if iteration % cfg.log_interval == 0 or iteration == cfg.iterations:
            logger.info(f"baseline iter {iteration}: loss={losses[-1]:.5f}")
    return model, losses


def aggregate_predictions(model: PerFrameClassifier, test_tracklets: Sequence[LabeledTracklet]):
    averaged, voted = [], []
    for t in test_tracklets:
        probs = model.view_probs(t.views)
        averaged.append(predict_by_averaging(probs))
        voted.append(predict_by_majority(probs))
    return np.array(averaged), np.array(voted)


def perframe_baseline(
    pool: RoiPool,
    test_tracklets: Sequence[LabeledTracklet],
    cfg: TrainConfig,
    groups: Optional[FrequencyGroups] = None,
) -> BaselineResult:
    if not test_tracklets:
        raise ValueError("Cannot evaluate the baseline on an empty test set")
    model, losses = train_perframe(pool, cfg)
    averaged, voted = aggregate_predictions(model, test_tracklets)
    labels = [t.label for t in test_tracklets]
    result = BaselineResult(
        averaging=accuracy_report(labels, averaged, groups),
        majority=accuracy_report(labels, voted, groups),
        model=model,
        losses=losses,
    )
    logger.info(
        f"Baseline accuracy: averaging {result.averaging.overall:.4f}, majority {result.majority.overall:.4f}"
    )
    return result
