import pytest

from src.core.augment import SamplerConfig
from src.core.synthdata import SynthConfig
from src.services.experiment_service import ExperimentConfig, format_experiment_table, run_experiment
from src.services.training_service import ModelHyperparams, OptimizerConfig, TrainConfig

# well separated prototypes, near-clean views, three rare classes
EASY_SYNTH = SynthConfig(
    num_classes=4,
    feature_dim=8,
    zipf_exponent=1.5,
    total_instances=40,
    views_per_instance=6,
    view_noise_sigma=0.05,
    occlusion_prob=0.0,
    prototype_sigma=3.0,
    instance_sigma=0.05,
    test_instances_per_class=3,
)


def _experiment(allow_multi_class=True):
    sampler = SamplerConfig(tracklets_per_batch=8, length_min=2, length_max_exclusive=6, exponent=1.0,
                            allow_multi_class=allow_multi_class)
    train = TrainConfig(
        sampler=sampler,
        model=ModelHyperparams(model_dim=16, heads=4, encoder_layers=1),
        optimizer=OptimizerConfig(lr=0.01),
        iterations=200,
        log_interval=200,
    )
    return ExperimentConfig(train=train, synth=EASY_SYNTH, seeds=[3])


@pytest.fixture(scope="module")
def multi_class_result():
    return run_experiment(_experiment())


def test_experiment_reports_both_methods(multi_class_result):
    summary = multi_class_result.summary()
    assert [o.seed for o in multi_class_result.outcomes] == [3]
    assert summary["set_classifier_rare"] is not None
    assert summary["baseline_rare"] is not None
    assert summary["delta_rare"] == pytest.approx(summary["set_classifier_rare"] - summary["baseline_rare"])
    assert "baseline/seed3" in format_experiment_table(multi_class_result)


def test_set_classifier_is_no_worse_than_baseline_on_rare(multi_class_result):
    summary = multi_class_result.summary()
    assert summary["set_classifier_rare"] >= summary["baseline_rare"]


def test_multi_class_tracklets_are_no_worse_than_single_class(multi_class_result):
    single = run_experiment(_experiment(allow_multi_class=False).model_copy(update={"run_baseline": False}))
    assert multi_class_result.summary()["set_classifier_rare"] >= single.summary()["set_classifier_rare"]
