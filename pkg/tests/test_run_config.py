from pathlib import Path

import pytest

from src.config.run_config import ConfigError, load_config, parse_run_config, parse_value
from src.services.experiment_service import ExperimentConfig
from src.services.training_service import TrainConfig

CONFIG_DIR = Path(__file__).parent.parent / "sample_files" / "configs"


@pytest.mark.parametrize("raw, expected", [
    ("12", 12),
    (" 0.5 ", 0.5),
    ("1e-3", 1e-3),
    ("true", True),
    ("Off", False),
    ("none", None),
    ("adam", "adam"),
    ("1, 2, 3", [1, 2, 3]),
    ('"a, b"', "a, b"),
    ("artifacts/s1/train.strk", "artifacts/s1/train.strk"),
])
def test_parse_value(raw, expected):
    assert parse_value(raw) == expected


def test_parse_run_config_nests_dotted_keys():
    text = """
    # leading comment
    iterations = 10   # trailing comment
    sampler.exponent = 0.25
    sampler.allow_multi_class = false
    weights.w_cluster = 0
    """
    assert parse_run_config(text) == {
        "iterations": 10,
        "sampler": {"exponent": 0.25, "allow_multi_class": False},
        "weights": {"w_cluster": 0},
    }


def test_hash_inside_value_is_kept():
    assert parse_run_config("checkpoint_path = runs/a#1.sckp") == {"checkpoint_path": "runs/a#1.sckp"}


@pytest.mark.parametrize("text, message", [
    ("iterations 10", "expected 'key = value'"),
    ("seed = 1\nseed = 2", "duplicate key"),
    ("sampler..exponent = 1", "Malformed key"),
    ("seed = 1\nseed.value = 2", "nests under scalar"),
])
def test_malformed_files(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_run_config(text)


def test_unknown_key_is_an_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("sampler.exponnent = 0.5\n")
    with pytest.raises(ConfigError, match="Unknown config key 'sampler.exponnent'"):
        load_config(path, TrainConfig)


def test_invalid_value_is_an_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("sampler.exponent = -1\n")
    with pytest.raises(ConfigError, match="Invalid value for 'sampler.exponent'"):
        load_config(path, TrainConfig)


def test_lengths_beyond_model_cap_are_rejected(tmp_path):
    path = tmp_path / "long.cfg"
    path.write_text("sampler.length_min = 100\nsampler.length_max_exclusive = 200\n")
    with pytest.raises(ConfigError):
        load_config(path, TrainConfig)


def test_overrides_apply_last(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("seed = 1\niterations = 5\n")
    cfg = load_config(path, TrainConfig, overrides={"seed": 9, "sampler.seed": 4})
    assert (cfg.seed, cfg.iterations, cfg.sampler.seed) == (9, 5, 4)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg", TrainConfig)


def test_train_sample_config_loads():
    cfg = load_config(CONFIG_DIR / "train.cfg", TrainConfig)
    assert cfg.model.model_dim == 64
    assert cfg.sampler.tracklets_per_batch == 64
    assert cfg.data.pool == "artifacts/s1/train.strk"


def test_experiment_sample_config_loads():
    cfg = load_config(CONFIG_DIR / "s1.cfg", ExperimentConfig)
    assert cfg.seeds == [1, 2, 3]
    assert cfg.synth.zipf_exponent == 1.5
    assert cfg.train.iterations == 5000


@pytest.mark.parametrize("path", sorted((CONFIG_DIR / "ablations").glob("*.cfg")), ids=lambda p: p.stem)
def test_every_ablation_config_loads(path):
    cfg = load_config(path, ExperimentConfig)
    assert cfg.train.iterations == 1500
    assert cfg.seeds == [1, 2, 3]


def test_ablation_rows_differ_where_expected():
    single = load_config(CONFIG_DIR / "ablations" / "single_identity.cfg", ExperimentConfig)
    assert not single.train.sampler.allow_multi_identity
    uniform = load_config(CONFIG_DIR / "ablations" / "exponent_0.cfg", ExperimentConfig)
    assert uniform.train.sampler.exponent == 0.0
    set_only = load_config(CONFIG_DIR / "ablations" / "loss_set_only.cfg", ExperimentConfig)
    assert (set_only.train.weights.w_ins, set_only.train.weights.w_cluster) == (0.0, 0.0)
    mixed = load_config(CONFIG_DIR / "ablations" / "pool_mixed.cfg", ExperimentConfig)
    assert mixed.pool_mode == "mixed"
