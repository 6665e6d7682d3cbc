import json
from unittest.mock import patch

import pytest

from src.api.cli import build_parser, main
from src.core.checkpoint import save_checkpoint
from src.core.set_classifier import SetClassifierConfig, SetClassifierModel
from src.utils.roi_io import read_jsonl, write_jsonl

SYNTH_FLAGS = [
    "--num-classes", "6", "--feature-dim", "8", "--zipf-exponent", "1.0", "--total-instances", "60",
    "--views-per-instance", "6", "--test-instances-per-class", "2",
]

SMALL_TRAINING = """
iterations = 2
log_interval = 1
model.model_dim = 16
model.heads = 4
model.encoder_layers = 1
sampler.tracklets_per_batch = 4
sampler.length_min = 2
sampler.length_max_exclusive = 5
"""


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--seed", "3"] + SYNTH_FLAGS) == 0
    return out


@pytest.fixture
def train_config(tmp_path, dataset_dir):
    path = tmp_path / "train.cfg"
    path.write_text(
        f"data.pool = {dataset_dir / 'train.strk'}\n"
        f"data.test = {dataset_dir / 'test.jsonl'}\n"
        f"data.manifest = {dataset_dir / 'manifest.json'}\n"
        f"checkpoint_path = {tmp_path / 'model.sckp'}\n" + SMALL_TRAINING
    )
    return path


def test_gen_data_writes_split(dataset_dir, capsys):
    for name in ("train.strk", "train.counts.json", "test.jsonl", "manifest.json"):
        assert (dataset_dir / name).exists()
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3
    assert manifest["config"]["num_classes"] == 6
    assert len(list(read_jsonl(dataset_dir / "test.jsonl"))) == 12


def test_gen_data_jsonl_format(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--format", "jsonl"] + SYNTH_FLAGS) == 0
    assert (tmp_path / "train.jsonl").exists()
    assert (tmp_path / "train.counts.json").exists()


def test_train_eval_reclassify(tmp_path, dataset_dir, train_config, capsys):
    assert main(["train", str(train_config), "--seed", "4"]) == 0
    checkpoint = tmp_path / "model.sckp"
    assert checkpoint.exists()
    history = json.loads((tmp_path / "model.history.json").read_text())
    assert len(history["history"]) == 2
    assert "Final loss" in capsys.readouterr().out

    report_path = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", str(checkpoint), "--test", str(dataset_dir / "test.jsonl"),
                 "--manifest", str(dataset_dir / "manifest.json"), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["num_tracklets"] == 12
    assert set(report["groups"]) == {"rare", "common", "frequent"}

    predicted = [
        {"views": row["views"], "tracker_score": 0.8, "track_id": i}
        for i, row in enumerate(read_jsonl(dataset_dir / "test.jsonl"))
    ]
    write_jsonl(predicted, tmp_path / "predicted.jsonl")
    fused_path = tmp_path / "fused.jsonl"
    assert main(["reclassify", "--checkpoint", str(checkpoint), "--tracklets", str(tmp_path / "predicted.jsonl"),
                 "--out", str(fused_path), "--lambda-c", "0.5", "--lambda-s", "0.5", "--workers", "2"]) == 0
    rows = list(read_jsonl(fused_path))
    assert [r["track_id"] for r in rows] == list(range(12))
    assert all(0 <= r["label"] < 6 and len(r["scores"]) == 6 for r in rows)


def test_train_out_flag_overrides_checkpoint_path(tmp_path, train_config):
    out = tmp_path / "elsewhere" / "run.sckp"
    assert main(["train", str(train_config), "--out", str(out)]) == 0
    assert out.exists()
    assert (tmp_path / "elsewhere" / "run.history.json").exists()


def test_baseline_command(tmp_path, train_config):
    out = tmp_path / "baseline.json"
    assert main(["baseline", str(train_config), "--out", str(out)]) == 0
    assert set(json.loads(out.read_text())) == {"averaging", "majority"}


def test_sample_stats_command(tmp_path, dataset_dir):
    out = tmp_path / "stats.json"
    assert main(["sample-stats", "--pool", str(dataset_dir / "train.strk"), "--exponent", "0", "--exponent", "1",
                 "--draws", "20000", "--out", str(out)]) == 0
    stats = json.loads(out.read_text())["stats"]
    assert [s["exponent"] for s in stats] == [0.0, 1.0]
    assert stats[1]["rarest_class_mass"] > stats[0]["rarest_class_mass"]


def test_grad_check_command(capsys):
    assert main(["grad-check", "--skip-model"]) == 0
    assert "PASSED" in capsys.readouterr().out


def test_grad_check_reports_failure():
    assert main(["grad-check", "--skip-model", "--tolerance", "1e-30"]) == 1


def test_experiment_command(tmp_path):
    config = tmp_path / "exp.cfg"
    config.write_text(
        "seeds = 2\n"
        "synth.num_classes = 6\nsynth.feature_dim = 8\nsynth.zipf_exponent = 1.0\n"
        "synth.total_instances = 60\nsynth.views_per_instance = 6\n"
        + "".join(f"train.{line}\n" for line in SMALL_TRAINING.strip().splitlines())
    )
    out = tmp_path / "exp"
    assert main(["experiment", str(config), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [s["seed"] for s in summary["seeds"]] == [2]
    assert (out / "seed_2" / "set_classifier.sckp").exists()
    assert (out / "seed_2" / "train.strk").exists()


def test_failures_return_nonzero(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.sckp"), "--test", str(tmp_path / "t.jsonl")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["train", str(bad)]) == 1


def test_seed_must_be_unsigned_64_bit():
    parser = build_parser()
    assert parser.parse_args(["grad-check", "--seed", str(2**64 - 1)]).seed == 2**64 - 1
    with pytest.raises(SystemExit):
        parser.parse_args(["grad-check", "--seed", "-1"])
    with pytest.raises(SystemExit):
        parser.parse_args(["grad-check", "--seed", str(2**64)])


def test_eval_upload_stores_report(tmp_path, dataset_dir):
    model = SetClassifierModel(
        SetClassifierConfig(input_dim=8, model_dim=8, heads=2, encoder_layers=1, num_classes=6), seed=0
    )
    checkpoint = save_checkpoint(model, tmp_path / "m.sckp")
    with patch("src.api.commands.StorageService") as service:
        assert main(["eval", "--checkpoint", str(checkpoint), "--test", str(dataset_dir / "test.jsonl"),
                     "--manifest", str(dataset_dir / "manifest.json"), "--upload"]) == 0
    run_name, report = service.return_value.store_report.call_args.args
    assert run_name.startswith("eval-")
    assert report["num_tracklets"] == 12
