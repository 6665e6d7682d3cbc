import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from src.core.set_classifier import SetClassifierModel, cap_tracklet, predict_set_probs
from src.core.synthdata import FrequencyGroups, LabeledTracklet
from src.utils.helpers import format_table

logger = logging.getLogger(__name__)

GROUP_NAMES = ("rare", "common", "frequent")


@dataclass
class EvaluationReport:
    """Top-1 accuracy overall and per frequency group; a group with no test tracklets reports None."""

    overall: float
    groups: Dict[str, Optional[float]]
    group_sizes: Dict[str, int]
    num_tracklets: int
    confusion: Dict[int, Dict[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["confusion"] = {str(t): {str(p): n for p, n in row.items()} for t, row in self.confusion.items()}
        return data


def accuracy_report(labels: Sequence[int], predictions: Sequence[int],
                    groups: Optional[FrequencyGroups] = None) -> EvaluationReport:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("Cannot evaluate an empty test set")
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels but {predictions.size} predictions")

    correct = labels == predictions
    group_acc: Dict[str, Optional[float]] = {}
    group_sizes: Dict[str, int] = {}
    for name in GROUP_NAMES:
        members = getattr(groups, name) if groups is not None else frozenset()
        mask = np.isin(labels, list(members))
        group_sizes[name] = int(mask.sum())
        group_acc[name] = float(correct[mask].mean()) if mask.any() else None

    confusion: Dict[int, Dict[int, int]] = {}
    for t, p in zip(labels.tolist(), predictions.tolist()):
        row = confusion.setdefault(t, {})
        row[p] = row.get(p, 0) + 1

    return EvaluationReport(
        overall=float(correct.mean()),
        groups=group_acc,
        group_sizes=group_sizes,
        num_tracklets=int(labels.size),
        confusion=confusion,
    )


def predict_probs(model: SetClassifierModel, views: Sequence[np.ndarray], workers: int = 1) -> np.ndarray:
    """Set-classifier class probabilities [N, C], one forward per tracklet, capped at max_length."""
    cap = model.config.max_length

    def run(features: np.ndarray) -> np.ndarray:
        return predict_set_probs(model.forward(cap_tracklet(features, cap))).data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, views))
    else:
        rows = [run(v) for v in views]
    return np.stack(rows) if rows else np.zeros((0, model.config.num_classes))


def evaluate(test_tracklets: Sequence[LabeledTracklet], model: SetClassifierModel,
             groups: Optional[FrequencyGroups] = None, workers: int = 1) -> EvaluationReport:
    if not test_tracklets:
        raise ValueError("Cannot evaluate an empty test set")
    probs = predict_probs(model, [t.views for t in test_tracklets], workers)
    report = accuracy_report([t.label for t in test_tracklets], np.argmax(probs, axis=1), groups)
    logger.info(f"Evaluated {report.num_tracklets} tracklets: overall accuracy {report.overall:.4f}")
    return report


def _cell(value: Optional[float]):
    return "-" if value is None else value


def format_report_table(reports: Mapping[str, EvaluationReport]) -> str:
    """One row per named report: overall and per-group accuracy."""
    headers = ["method", "overall"] + list(GROUP_NAMES)
    rows: List[list] = []
    for name, report in reports.items():
        rows.append([name, report.overall] + [_cell(report.groups[g]) for g in GROUP_NAMES])
    return format_table(headers, rows)
