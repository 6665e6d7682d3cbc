"""One handler per CLI subcommand; each returns the process exit code."""
import argparse
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from src.config.run_config import load_config
from src.config.settings import settings
from src.core.augment import sample_stats as pool_sample_stats
from src.core.checkpoint import load_checkpoint
from src.core.synthdata import FrequencyGroups, SynthConfig, frequency_groups, generate_dataset
from src.services import evaluation_service, reclassify_service, training_service
from src.services.baseline_service import perframe_baseline
from src.services.experiment_service import ExperimentConfig, format_experiment_table, run_experiment
from src.services.storage_service import StorageService, default_run_name
from src.utils.gradcheck import run_suite
from src.utils.helpers import format_table, write_json
from src.utils.roi_io import (
    load_pool,
    read_class_counts,
    read_jsonl,
    read_manifest_groups,
    read_test_tracklets,
    save_pool,
    write_jsonl,
    write_test_tracklets,
)

logger = logging.getLogger(__name__)

DEFAULT_EXPONENTS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _groups(manifest: Optional[str], counts: Optional[str] = None) -> Optional[FrequencyGroups]:
    if manifest:
        return read_manifest_groups(manifest)
    if counts:
        return frequency_groups(read_class_counts(counts))
    return None


def _train_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["checkpoint_path"] = args.out
    return overrides


def gen_data(args: argparse.Namespace) -> int:
    values = {name: getattr(args, name) for name in SynthConfig.model_fields if getattr(args, name, None) is not None}
    values["seed"] = args.seed
    dataset = generate_dataset(SynthConfig(**values))
    out = Path(args.out)
    pool_path = save_pool(dataset.train_pool, out / f"train.{args.format}")
    write_test_tracklets(dataset.test_tracklets, out / "test.jsonl")
    write_json(dataset.manifest(), out / "manifest.json")
    groups = dataset.groups
    print(f"Wrote {len(dataset.train_pool)} train records to {pool_path} and "
          f"{len(dataset.test_tracklets)} test tracklets to {out / 'test.jsonl'}")
    print(f"Classes: {len(groups.rare)} rare, {len(groups.common)} common, {len(groups.frequent)} frequent")
    return 0


def train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, training_service.TrainConfig, _train_overrides(args))
    if cfg.history_path is None:
        cfg = cfg.model_copy(update={"history_path": str(Path(cfg.checkpoint_path).with_suffix(".history.json"))})
    pool, extra = training_service.load_training_pools(cfg.data)
    tests = read_test_tracklets(cfg.data.test) if cfg.data.test else None
    result = training_service.train(pool, cfg, extra_pool=extra, test_tracklets=tests, groups=_groups(cfg.data.manifest))
    final = result.final_report
    print(f"Checkpoint: {result.checkpoint_path}")
    print(f"Final loss: total={final['total']:.5f} sc={final['l_sc']:.5f} "
          f"ins={final['l_ins']:.5f} cluster={final['l_cluster']:.5f}")
    if args.upload:
        StorageService().publish_run(default_run_name("train"), [result.checkpoint_path, cfg.history_path])
    return 0


def evaluate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    tests = read_test_tracklets(args.test)
    report = evaluation_service.evaluate(tests, model, _groups(args.manifest, args.counts), args.workers)
    print(evaluation_service.format_report_table({"set_classifier": report}))
    if args.out:
        write_json(report.to_dict(), args.out)
    if args.upload:
        StorageService().store_report(default_run_name("eval"), report.to_dict())
    return 0


def reclassify(args: argparse.Namespace) -> int:
    cfg = reclassify_service.FusionConfig(
        lambda_c=args.lambda_c,
        lambda_s=args.lambda_s,
        length_penalty=not args.no_length_penalty,
        scalar_class_score=args.scalar_class_score,
    )
    tracklets = [reclassify_service.PredictedTracklet.model_validate(row) for row in read_jsonl(args.tracklets)]
    results = reclassify_service.reclassify(tracklets, args.checkpoint, cfg, args.workers)
    write_jsonl((r.to_json() for r in results), args.out)
    print(f"Wrote fused scores for {len(results)} tracklets to {args.out}")
    return 0


def grad_check(args: argparse.Namespace) -> int:
    report = run_suite(
        seed=args.seed,
        entries_per_param=args.entries_per_param,
        tolerance=args.tolerance,
        include_model=not args.skip_model,
    )
    rows = [[r.case, r.parameter, r.entries, f"{r.max_rel_error:.2e}", "ok" if r.passed else "FAIL"]
            for r in report.results]
    print(format_table(["case", "parameter", "entries", "max rel. error", "status"], rows))
    print(f"{'PASSED' if report.passed else 'FAILED'} in {report.seconds:.1f}s")
    return 0 if report.passed else 1


def sample_stats(args: argparse.Namespace) -> int:
    pool = load_pool(args.pool, args.counts)
    exponents = args.exponent or list(DEFAULT_EXPONENTS)
    streams = np.random.SeedSequence(args.seed).spawn(len(exponents))
    stats = [pool_sample_stats(pool, p, args.draws, np.random.default_rng(s)) for p, s in zip(exponents, streams)]
    rows = [[s["exponent"], s["record_l1"], s["class_l1"], s["rarest_class_mass"]] for s in stats]
    print(format_table(["exponent", "record L1", "class L1", "rarest-class mass"], rows))
    if args.out:
        write_json({"pool": args.pool, "stats": stats}, args.out)
    return 0


def baseline(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, training_service.TrainConfig, {"seed": args.seed} if args.seed is not None else {})
    if not cfg.data.test:
        raise ValueError("data.test is not set")
    pool, _ = training_service.load_training_pools(cfg.data)
    result = perframe_baseline(pool, read_test_tracklets(cfg.data.test), cfg, _groups(cfg.data.manifest))
    print(evaluation_service.format_report_table({"averaging": result.averaging, "majority": result.majority}))
    if args.out:
        write_json(result.to_dict(), args.out)
    return 0


def experiment(args: argparse.Namespace) -> int:
    overrides = {"seeds": args.seeds} if args.seeds else {}
    cfg = load_config(args.config, ExperimentConfig, overrides)
    out = Path(args.out) if args.out else Path(settings.ARTIFACT_DIR) / Path(args.config).stem
    result = run_experiment(cfg, out)
    print(format_experiment_table(result))
    for key, value in result.summary().items():
        print(f"{key}: {'-' if value is None else f'{value:.4f}'}")
    if args.upload:
        paths = [p for p in out.rglob("*") if p.suffix in (".json", ".sckp")]
        StorageService().publish_run(default_run_name(Path(args.config).stem), paths, root=out)
    return 0
