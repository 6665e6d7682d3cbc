"""
Desk-scale comparison of the set classifier against the per-frame baseline.

For every seed: generate the synthetic split, persist it, train both models
on the same train pool and evaluate both on the same test tracklets.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.augment import RoiPool
from src.core.synthdata import SynthConfig, SynthDataset, generate_dataset
from src.services.baseline_service import perframe_baseline
from src.services.evaluation_service import EvaluationReport, evaluate, format_report_table
from src.services.training_service import TrainConfig, train
from src.utils.helpers import write_json
from src.utils.roi_io import save_pool, write_test_tracklets

logger = logging.getLogger(__name__)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    # video: multi-view pool only; image: few views, many proposals; mixed: both
    pool_mode: Literal["video", "image", "mixed"] = "video"
    image_views_per_instance: int = Field(2, ge=1)
    image_proposals_per_view: int = Field(8, ge=1)
    run_baseline: bool = True
    workers: int = Field(1, ge=1)

    @field_validator("seeds", mode="before")
    @classmethod
    def _listify_seeds(cls, seeds):
        return [seeds] if isinstance(seeds, int) else seeds


@dataclass
class SeedOutcome:
    seed: int
    set_classifier: EvaluationReport
    baseline: Optional[EvaluationReport] = None

    def delta(self, group: Optional[str] = None) -> Optional[float]:
        if self.baseline is None:
            return None
        if group is None:
            return self.set_classifier.overall - self.baseline.overall
        ours, theirs = self.set_classifier.groups[group], self.baseline.groups[group]
        return None if ours is None or theirs is None else ours - theirs

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "set_classifier": self.set_classifier.to_dict(),
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "delta_overall": self.delta(),
            "delta_rare": self.delta("rare"),
        }


@dataclass
class ExperimentResult:
    outcomes: List[SeedOutcome] = field(default_factory=list)

    def mean(self, method: str, group: Optional[str] = None) -> Optional[float]:
        values = []
        for outcome in self.outcomes:
            report = getattr(outcome, method)
            if report is None:
                return None
            value = report.overall if group is None else report.groups[group]
            if value is None:
                return None
            values.append(value)
        return float(np.mean(values)) if values else None

    def summary(self) -> Dict[str, Optional[float]]:
        summary = {}
        for method in ("set_classifier", "baseline"):
            summary[f"{method}_overall"] = self.mean(method)
            summary[f"{method}_rare"] = self.mean(method, "rare")
        if summary["baseline_overall"] is not None:
            summary["delta_overall"] = summary["set_classifier_overall"] - summary["baseline_overall"]
        if summary["baseline_rare"] is not None and summary["set_classifier_rare"] is not None:
            summary["delta_rare"] = summary["set_classifier_rare"] - summary["baseline_rare"]
        return summary

    def to_dict(self) -> dict:
        return {"seeds": [o.to_dict() for o in self.outcomes], "summary": self.summary()}


def image_like_config(synth: SynthConfig, cfg: ExperimentConfig) -> SynthConfig:
    """Same prototypes, fresh instances seen in few views with many proposals each."""
    return synth.model_copy(update={
        "split": synth.split + 1,
        "views_per_instance": cfg.image_views_per_instance,
        "proposals_per_view": cfg.image_proposals_per_view,
    })


def training_pools(dataset: SynthDataset, cfg: ExperimentConfig) -> Tuple[RoiPool, Optional[RoiPool]]:
    if cfg.pool_mode == "video":
        return dataset.train_pool, None
    image_pool = generate_dataset(image_like_config(dataset.config, cfg)).train_pool
    if cfg.pool_mode == "image":
        return image_pool, None
    return dataset.train_pool, image_pool


def persist_split(dataset: SynthDataset, out_dir: Path) -> None:
    save_pool(dataset.train_pool, out_dir / "train.strk")
    write_test_tracklets(dataset.test_tracklets, out_dir / "test.jsonl")
    write_json(dataset.manifest(), out_dir / "manifest.json")


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None) -> SeedOutcome:
    dataset = generate_dataset(cfg.synth.model_copy(update={"seed": seed}))
    groups = dataset.groups
    seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir else None
    if seed_dir:
        persist_split(dataset, seed_dir)

    update = {"seed": seed}
    if seed_dir:
        update["checkpoint_path"] = str(seed_dir / "set_classifier.sckp")
    train_cfg = cfg.train.model_copy(update=update)
    pool, extra = training_pools(dataset, cfg)

    trained = train(pool, train_cfg, extra_pool=extra, write_checkpoint=seed_dir is not None)
    outcome = SeedOutcome(seed=seed, set_classifier=evaluate(dataset.test_tracklets, trained.model, groups, cfg.workers))
    if cfg.run_baseline:
        outcome.baseline = perframe_baseline(pool, dataset.test_tracklets, train_cfg, groups).averaging
    if seed_dir:
        write_json(outcome.to_dict(), seed_dir / "report.json")
    return outcome


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> ExperimentResult:
    result = ExperimentResult()
    for seed in cfg.seeds:
        logger.info(f"Experiment seed {seed} ({cfg.pool_mode} pool)")
        result.outcomes.append(run_seed(cfg, seed, out_dir))
    if out_dir:
        write_json(result.to_dict(), Path(out_dir) / "summary.json")
    logger.info(f"Experiment summary: {result.summary()}")
    return result


def format_experiment_table(result: ExperimentResult) -> str:
    reports = {}
    for outcome in result.outcomes:
        reports[f"set_classifier/seed{outcome.seed}"] = outcome.set_classifier
        if outcome.baseline is not None:
            reports[f"baseline/seed{outcome.seed}"] = outcome.baseline
    return format_report_table(reports)
