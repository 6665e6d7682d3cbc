import json

import numpy as np
import pytest

from src.core.augment import SamplerConfig
from src.core.checkpoint import load_checkpoint, save_checkpoint
from src.core.perframe import PerFrameClassifier, predict_by_averaging, predict_by_majority
from src.core.set_classifier import SetClassifierConfig, SetClassifierModel
from src.core.synthdata import FrequencyGroups, LabeledTracklet, generate_dataset
from src.services.baseline_service import aggregate_predictions, perframe_baseline, records_per_batch
from src.services.evaluation_service import accuracy_report, evaluate, format_report_table, predict_probs
from src.services.training_service import ModelHyperparams, OptimizerConfig, TrainConfig

GROUPS = FrequencyGroups(rare=frozenset({0}), common=frozenset({1}), frequent=frozenset({2}))


def test_hand_built_accuracy_fixture():
    report = accuracy_report([0, 0, 1, 2], [0, 1, 1, 0], GROUPS)
    assert report.overall == 0.5
    assert report.groups == {"rare": 0.5, "common": 1.0, "frequent": 0.0}
    assert report.group_sizes == {"rare": 2, "common": 1, "frequent": 1}
    assert report.confusion == {0: {0: 1, 1: 1}, 1: {1: 1}, 2: {0: 1}}


def test_perfect_predictions():
    report = accuracy_report([0, 1, 2, 2], [0, 1, 2, 2], GROUPS)
    assert report.overall == 1.0
    assert all(v == 1.0 for v in report.groups.values())


def test_group_without_tracklets_reports_none():
    report = accuracy_report([1, 1], [1, 0], GROUPS)
    assert report.groups["rare"] is None
    assert report.groups["common"] == 0.5
    assert report.to_dict()["confusion"] == {"1": {"1": 1, "0": 1}}


def test_empty_and_mismatched_inputs():
    with pytest.raises(ValueError):
        accuracy_report([], [])
    with pytest.raises(ValueError):
        accuracy_report([0, 1], [0])


def test_report_table_lists_every_group():
    table = format_report_table({"ours": accuracy_report([0, 0, 1, 2], [0, 1, 1, 0], GROUPS)})
    header, _, row = table.splitlines()[:3]
    assert header.split() == ["method", "overall", "rare", "common", "frequent"]
    assert row.split() == ["ours", "0.5000", "0.5000", "1.0000", "0.0000"]


def _tracklets(rng, count, length, input_dim=6, classes=5):
    return [
        LabeledTracklet(views=rng.normal(size=(length, input_dim)), label=int(i % classes), identity=i)
        for i in range(count)
    ]


def test_evaluate_uses_argmax_of_set_probabilities(small_model, rng):
    tracklets = _tracklets(rng, 6, 4)
    probs = predict_probs(small_model, [t.views for t in tracklets])
    assert probs.shape == (6, 5)
    assert np.allclose(probs.sum(axis=1), 1.0)
    report = evaluate(tracklets, small_model)
    expected = np.mean(np.argmax(probs, axis=1) == [t.label for t in tracklets])
    assert report.overall == pytest.approx(expected)


def test_parallel_prediction_matches_serial(small_model, rng):
    views = [t.views for t in _tracklets(rng, 5, 3)]
    assert np.array_equal(predict_probs(small_model, views, workers=3), predict_probs(small_model, views))


def test_long_tracklets_are_capped(rng):
    model = SetClassifierModel(SetClassifierConfig(
        input_dim=6, model_dim=8, heads=2, encoder_layers=1, num_classes=5, max_length=16
    ))
    report = evaluate(_tracklets(rng, 2, 40), model)
    assert report.num_tracklets == 2


def test_evaluate_rejects_empty_set(small_model):
    with pytest.raises(ValueError):
        evaluate([], small_model)


def test_single_view_tracklets_aggregate_identically(small_config, rng):
    model = PerFrameClassifier(small_config, seed=2)
    averaged, voted = aggregate_predictions(model, _tracklets(rng, 10, 1))
    assert np.array_equal(averaged, voted)


@pytest.mark.parametrize("probs, averaging, majority", [
    ([[0.5, 0.5]], 0, 0),
    ([[0.6, 0.4], [0.1, 0.9]], 1, 0),
    ([[0.6, 0.4], [0.6, 0.4], [0.0, 1.0]], 1, 0),
])
def test_aggregation_rules(probs, averaging, majority):
    assert predict_by_averaging(np.array(probs)) == averaging
    assert predict_by_majority(np.array(probs)) == majority


def test_records_per_batch_matches_mean_tracklet_size():
    cfg = TrainConfig(sampler=SamplerConfig(tracklets_per_batch=10, length_min=16, length_max_exclusive=32))
    assert records_per_batch(cfg) == 235


def test_baseline_fits_noiseless_data(tiny_synth):
    synth = tiny_synth.model_copy(update={"occlusion_prob": 0.0, "view_noise_sigma": 0.0, "instance_sigma": 0.0})
    data = generate_dataset(synth)
    cfg = TrainConfig(
        sampler=SamplerConfig(tracklets_per_batch=16, length_min=2, length_max_exclusive=5),
        model=ModelHyperparams(model_dim=16, heads=4, encoder_layers=1),
        optimizer=OptimizerConfig(lr=0.01),
        iterations=300,
        seed=1,
    )
    result = perframe_baseline(data.train_pool, data.test_tracklets, cfg, data.groups)
    assert result.averaging.overall >= 0.99
    assert result.majority.overall >= 0.99
    assert len(result.losses) == 300
    assert result.losses[-1] < result.losses[0]


def test_baseline_rejects_empty_test_set(fixture_pool):
    with pytest.raises(ValueError):
        perframe_baseline(fixture_pool, [], TrainConfig(iterations=1))


def test_frozen_checkpoint_report_matches_snapshot(small_model, rng, tmp_path, data_dir):
    # a zero set-head weight makes the set logits equal the bias
    named = small_model.named_parameters()
    named["set_head.weight"].data[...] = 0.0
    named["set_head.bias"].data[...] = [0.0, 0.0, 3.0, 0.0, 0.0]
    frozen = load_checkpoint(save_checkpoint(small_model, tmp_path / "frozen.sckp"))

    labels = [2, 2, 0, 1, 2, 3]
    tracklets = [LabeledTracklet(views=rng.normal(size=(3 + i, 6)), label=c, identity=i) for i, c in enumerate(labels)]
    groups = FrequencyGroups(rare=frozenset({0, 3}), common=frozenset({1}), frequent=frozenset({2}))
    snapshot = json.loads((data_dir / "evaluation_snapshot.json").read_text())
    for workers in (1, 2):
        report = evaluate(tracklets, frozen, groups, workers)
        assert json.loads(json.dumps(report.to_dict())) == snapshot
