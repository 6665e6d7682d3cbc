import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.augment import RoiPool, SamplerConfig, Tracklet, TrackletGenerator, concat_pools, mixture_probs
from src.core.checkpoint import save_checkpoint
from src.core.diffcore import NonFiniteError, Tensor, backward, create_optimizer_state, optimizer_step, zero_grad
from src.core.losses import LossReport, LossWeights, cluster_loss, combine_losses, instance_loss, set_loss
from src.core.set_classifier import SetClassifierConfig, SetClassifierModel
from src.core.synthdata import FrequencyGroups, LabeledTracklet
from src.services.evaluation_service import evaluate
from src.utils.helpers import write_json
from src.utils.roi_io import load_pool

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rule: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1)

    def settings(self) -> dict:
        if self.rule == "sgd":
            return {"lr": self.lr, "momentum": self.momentum}
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


class ModelHyperparams(BaseModel):
    """Set classifier shape; input_dim and num_classes default to the pool's."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model_dim: int = Field(512, ge=1)
    heads: int = Field(8, ge=1)
    encoder_layers: int = Field(3, ge=1)
    feedforward_dim: Optional[int] = Field(None, ge=1)
    max_length: int = Field(128, ge=1)
    layer_norm_eps: float = Field(1e-5, gt=0)
    num_classes: Optional[int] = Field(None, ge=2)

    def build(self, input_dim: int, num_classes: int) -> SetClassifierConfig:
        return SetClassifierConfig(
            input_dim=input_dim,
            model_dim=self.model_dim,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            num_classes=max(num_classes, self.num_classes or 0),
            feedforward_dim=self.feedforward_dim,
            max_length=self.max_length,
            layer_norm_eps=self.layer_norm_eps,
        )


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    pool: Optional[str] = None
    counts: Optional[str] = None
    test: Optional[str] = None
    manifest: Optional[str] = None
    extra_pool: Optional[str] = None
    extra_counts: Optional[str] = None
    # sampling mass of the extra pool relative to the main pool
    extra_pool_ratio: float = Field(1.0, ge=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sampler: SamplerConfig = SamplerConfig()
    model: ModelHyperparams = ModelHyperparams()
    weights: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    iterations: int = Field(5000, ge=1)
    eval_interval: int = Field(0, ge=0)
    log_interval: int = Field(50, ge=1)
    checkpoint_path: str = "artifacts/set_classifier.sckp"
    history_path: Optional[str] = None
    seed: int = Field(0, ge=0, le=2**64 - 1)
    precision: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.sampler.length_max_exclusive - 1 > self.model.max_length:
            raise ValueError(
                f"Sampler lengths up to {self.sampler.length_max_exclusive - 1} exceed model.max_length {self.model.max_length}"
            )
        return self


@dataclass
class TrainingResult:
    model: SetClassifierModel
    history: List[Dict[str, float]] = field(default_factory=list)
    evaluations: List[Dict[str, float]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None

    @property
    def final_report(self) -> Optional[Dict[str, float]]:
        return self.history[-1] if self.history else None

    def to_dict(self) -> dict:
        return {
            "history": self.history,
            "evaluations": self.evaluations,
            "checkpoint_path": str(self.checkpoint_path) if self.checkpoint_path else None,
        }


def training_streams(seed: int, sampler_seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for weight init and tracklet sampling."""
    init_seq, sample_seq = np.random.SeedSequence([seed, sampler_seed]).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(sample_seq)


def build_generator(pool: RoiPool, sampler: SamplerConfig, extra_pool: Optional[RoiPool] = None,
                    extra_ratio: float = 1.0) -> TrackletGenerator:
    if extra_pool is None:
        return TrackletGenerator(pool, sampler)
    merged, _ = concat_pools([pool, extra_pool])
    probs = mixture_probs([pool, extra_pool], [1.0, extra_ratio], sampler.exponent)
    logger.info(f"Mixed pools: {len(pool)} + {len(extra_pool)} records, ratio 1:{extra_ratio}")
    return TrackletGenerator(merged, sampler, probs)


def batch_row_weights(lengths: Sequence[int]) -> np.ndarray:
    """1 / (B * L_b) for every token of tracklet b."""
    batch = len(lengths)
    return np.concatenate([np.full(length, 1.0 / (batch * length)) for length in lengths])


def batch_loss(model: SetClassifierModel, tracklets: Sequence[Tracklet], weights: LossWeights) -> Tuple[Tensor, LossReport]:
    """Weighted set/instance/cluster loss of a padded batch; a zero weight skips that term."""
    out = model.forward_batch([t.features for t in tracklets])
    labels = np.stack([t.soft_label for t in tracklets])
    l_sc = set_loss(labels, out.set_logits)

    categories = np.concatenate([t.categories for t in tracklets])
    row_weights = batch_row_weights(out.lengths)
    zero = Tensor(np.zeros((), dtype=model.dtype))
    l_ins = instance_loss(categories, out.instance_logits, row_weights) if weights.w_ins > 0 else zero
    if weights.w_cluster > 0:
        # identities only group tokens within their own tracklet
        owners = np.repeat(np.arange(len(tracklets)), out.lengths)
        keys = np.stack([owners, np.concatenate([t.identities for t in tracklets])], axis=1)
        l_cluster = cluster_loss(categories, keys, out.cluster_logits, row_weights)
    else:
        l_cluster = zero
    return combine_losses(l_sc, l_ins, l_cluster, weights)


def load_training_pools(data: DataConfig, num_classes: int = 0) -> Tuple[RoiPool, Optional[RoiPool]]:
    if not data.pool:
        raise ValueError("data.pool is not set")
    pool = load_pool(data.pool, data.counts, num_classes)
    extra = load_pool(data.extra_pool, data.extra_counts, num_classes) if data.extra_pool else None
    return pool, extra


def train(
    pool: RoiPool,
    cfg: TrainConfig,
    extra_pool: Optional[RoiPool] = None,
    test_tracklets: Optional[Sequence[LabeledTracklet]] = None,
    groups: Optional[FrequencyGroups] = None,
    write_checkpoint: bool = True,
) -> TrainingResult:
    """Optimize a freshly initialized set classifier on tracklets drawn from `pool`."""
    generator = build_generator(pool, cfg.sampler, extra_pool, cfg.data.extra_pool_ratio)
    init_rng, sample_rng = training_streams(cfg.seed, cfg.sampler.seed)
    model_cfg = cfg.model.build(generator.pool.input_dim, generator.pool.num_classes)
    model = SetClassifierModel(model_cfg, rng=init_rng, precision=cfg.precision)
    params = model.parameters()
    state = create_optimizer_state(params, cfg.optimizer.rule, **cfg.optimizer.settings())
    result = TrainingResult(model=model)
    logger.info(
        f"Training set classifier: {len(generator.pool)} records, {model_cfg.num_classes} classes, "
        f"{cfg.iterations} iterations of {cfg.sampler.tracklets_per_batch} tracklets"
    )

    for iteration in range(1, cfg.iterations + 1):
        batch = generator.generate_batch(sample_rng)
        try:
            loss, report = batch_loss(model, batch, cfg.weights)
            zero_grad(params)
            backward(loss, params)
        except NonFiniteError as e:
            last = result.final_report
            logger.error(f"Training diverged at iteration {iteration}: {str(e)}; last report {last}")
            raise TrainingDivergedError(f"Non-finite loss at iteration {iteration}: {str(e)}") from e
        optimizer_step(state, params)
        result.history.append({"iteration": iteration, **report.to_dict()})

        if iteration % cfg.log_interval == 0 or iteration == cfg.iterations:
            logger.info(
                f"iter {iteration}: total={report.total:.5f} sc={report.l_sc:.5f} "
                f"ins={report.l_ins:.5f} cluster={report.l_cluster:.5f}"
            )
        if cfg.eval_interval and test_tracklets and iteration % cfg.eval_interval == 0:
            accuracy = evaluate(test_tracklets, model, groups).overall
            result.evaluations.append({"iteration": iteration, "accuracy": accuracy})
            logger.info(f"iter {iteration}: eval accuracy {accuracy:.4f}")

    if write_checkpoint:
        result.checkpoint_path = save_checkpoint(model, cfg.checkpoint_path)
        if cfg.history_path:
            write_json(result.to_dict(), cfg.history_path)
    return result
