"""``mosfuse`` command line: ingest, train, predict, evaluate, ablate, pipeline.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 partial
prediction failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .audio import AudioError, load_audio
from .config import ConfigError, RunConfig, config_schema, load_config
from .data import WaveformStore
from .fusion import CheckpointError, UnseenDomainError
from .infer import InferenceConfig, load_fold_models, predict_ensemble, predict_manifest, write_predictions
from .ingest import IngestError, Manifest, dataset_stats, ingest, read_manifest, write_manifest
from .metrics import TableMismatchError, UndefinedCorrelationError, evaluate, read_table, truth_table
from .trainer import continue_training, make_folds, train_full
from .utils import config_hash

logger = logging.getLogger("mosfuse")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, IngestError, TableMismatchError, UnseenDomainError, UndefinedCorrelationError)
ABLATION_ARMS = ("no-ssl", "no-spec", "no-stage2", "only-stage3", "domain-sweep")
RUN_SUBDIRS = ("config", "checkpoints", "history", "predictions", "reports")


class PartialFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Building blocks shared by the subcommands


def ingest_all(specs) -> Manifest:
    labels = []
    for ds in specs:
        manifest, _, _ = ingest(ds.path, ds.format, ds.rules, check_audio=ds.check_audio)
        labels.extend(manifest.labels)
    if not labels:
        raise IngestError("no datasets configured")
    return Manifest(labels)


def make_run_dir(cfg: RunConfig, tag: str = "") -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = Path(cfg.run_root) / (stamp + (f"-{tag}" if tag else ""))
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    snap = cfg.snapshot()
    (run_dir / "config" / "config.yaml").write_text(yaml.safe_dump(snap, sort_keys=True))
    (run_dir / "config" / "config_hash.txt").write_text(config_hash(snap) + "\n")
    return run_dir


def write_report(report: dict, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _eval_block(rows, truths: Manifest, cfg: RunConfig) -> List[dict]:
    import pandas as pd

    preds = pd.DataFrame(rows, columns=["dataset_id", "system_id", "utterance_id", "pred_mos"])
    if cfg.evaluation.clamp:
        preds["pred_mos"] = preds["pred_mos"].clip(1.0, 5.0)
    present = {(d, u) for d, _, u, _ in rows}
    truth = truth_table([lab for lab in truths.labels if (lab.dataset_id, lab.utterance_id) in present])
    ev = cfg.evaluation
    return evaluate(preds, truth, ev.levels, ev.zoom_rates, ev.ktau_variant)


def _heldout_predictions(cfg: RunConfig, manifest: Manifest, test: Optional[Manifest], models, inf_cfg, store):
    """Predictions on the test manifest, or out-of-fold predictions without one."""
    if test is not None:
        res = predict_manifest(models, test, inf_cfg, cfg.audio, store)
        return res, test
    split = make_folds(manifest, cfg.folds, cfg.seed)
    rows, errors, logs = [], [], []
    for fold, model in enumerate(models):
        _, val = split.split(manifest, fold)
        res = predict_manifest([model], val, inf_cfg, cfg.audio, store)
        rows += res.rows
        errors += res.errors
        logs += res.logs
    order = {lab.key: i for i, lab in enumerate(manifest.labels)}
    rows.sort(key=lambda r: order[(r[0], r[2])])
    from .infer import ManifestPredictions

    return ManifestPredictions(rows, errors, logs), manifest


def _write_prediction_outputs(run_dir: Path, res, name: str, snap_hash: str) -> None:
    write_predictions(res.rows, run_dir / "predictions" / f"{name}.csv")
    with (run_dir / "predictions" / f"{name}_log.jsonl").open("w") as handle:
        for entry in res.logs:
            handle.write(json.dumps({**entry, "config_hash": snap_hash}, sort_keys=True) + "\n")


def cmd_pipeline(
    cfg: RunConfig,
    arm: str = "full",
    drop_dataset: Optional[str] = None,
    run_dir: Optional[Path] = None,
) -> dict:
    """ingest -> train_full -> held-out prediction -> evaluation; returns the report."""
    run_dir = run_dir or make_run_dir(cfg, tag="" if arm == "full" else arm.replace(":", "-"))
    snap_hash = config_hash(cfg.snapshot())
    manifest = ingest_all(cfg.datasets)
    if drop_dataset is not None:
        if drop_dataset not in manifest.domain_vocabulary:
            raise ConfigError(f"cannot drop {drop_dataset!r}: not among {manifest.domain_vocabulary}")
        manifest = manifest.subset(lambda lab: lab.dataset_id != drop_dataset)
    write_manifest(manifest, run_dir / "config" / "train_manifest.csv")
    test = ingest_all(cfg.test_datasets) if cfg.test_datasets else None
    if test is not None:
        write_manifest(test, run_dir / "config" / "test_manifest.csv")
    store = WaveformStore(cfg.audio.sample_rate)
    train_arm = "full" if arm in ("domain-sweep",) or arm.startswith("drop-dataset") else arm
    result = train_full(manifest, cfg, cfg.seed, train_arm, run_dir, store)

    report = {"config_hash": snap_hash, "arm": arm, "blocks": []}
    if arm == "domain-sweep":
        # Domain tokens of the trained model, one evaluation each.
        vocab = result.models[0].domain.vocabulary if result.models[0].domain is not None else []
        if not vocab:
            raise ConfigError("domain-sweep needs a model trained with domain encoding")
        sweeps = [InferenceConfig(cfg.inference.tta_reps, "fixed", [tok], cfg.seed, cfg.model.ssl.input) for tok in vocab]
    else:
        sweeps = [InferenceConfig.from_run_config(cfg)]
    partial = False
    for inf_cfg in sweeps:
        res, truths = _heldout_predictions(cfg, manifest, test, result.models, inf_cfg, store)
        partial = partial or res.partial
        name = "heldout" if len(sweeps) == 1 else f"heldout_{inf_cfg.domains[0]}"
        _write_prediction_outputs(run_dir, res, name, snap_hash)
        report["blocks"].append(
            {
                "domain_mode": inf_cfg.domain_mode,
                "domains": inf_cfg.domains if inf_cfg.domain_mode != "off" else [],
                "errors": len(res.errors),
                "conditions": _eval_block(res.rows, truths, cfg),
            }
        )
    report["selection"] = result.report
    write_report(report, run_dir / "reports" / "report.json")
    report["run_dir"] = str(run_dir)
    if partial:
        logger.warning("some utterances failed during prediction; see predictions/*_log.jsonl")
    return report


def cmd_ablate(cfg: RunConfig, arm: str) -> dict:
    """Run one ablation arm on a private copy of the config."""
    cfg = copy.deepcopy(cfg)
    if arm.startswith("drop-dataset:"):
        return cmd_pipeline(cfg, arm=arm, drop_dataset=arm.split(":", 1)[1])
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; known: {ABLATION_ARMS + ('drop-dataset:<id>',)}")
    return cmd_pipeline(cfg, arm=arm)


# ---------------------------------------------------------------------------
# argparse glue


def parse_domain(value: str) -> InferenceConfig:
    if value == "off":
        return InferenceConfig(domain_mode="off", domains=[])
    if value.startswith("average:"):
        return InferenceConfig(domain_mode="average", domains=[t for t in value[8:].split(",") if t])
    return InferenceConfig(domain_mode="fixed", domains=[value])


def find_checkpoints(path: Path) -> List[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    for cand in (path, path / "checkpoints"):
        found = sorted(cand.glob("fold_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
        if found:
            return found
    raise CheckpointError(f"no fold_*.pt checkpoints under {path}")


def _run_ingest(args) -> int:
    manifest, records, counts = ingest(args.input, args.format, args.rules, check_audio=not args.no_check_audio)
    write_manifest(manifest, args.out)
    for rule, n in counts.items():
        print(f"rule {rule}: removed {n}")
    for row in dataset_stats(records):
        print(f"{row.dataset_id}: listeners={row.listeners} systems={row.systems} "
              f"sentences={row.sentences} ratings={row.ratings}")
    return EXIT_OK


def _run_train(args) -> int:
    cfg = load_config(args.config)
    manifest = read_manifest(args.manifest) if args.manifest else ingest_all(cfg.datasets)
    out = Path(args.out) if args.out else make_run_dir(cfg, "train")
    if args.init_ckpt:
        result = continue_training([str(p) for p in find_checkpoints(args.init_ckpt)], manifest, cfg, args.stage, out_dir=out)
    else:
        result = train_full(manifest, cfg, cfg.seed, args.arm, out)
    print(json.dumps({"checkpoints": result.checkpoints}, indent=2))
    return EXIT_OK


def _run_predict(args) -> int:
    inf = parse_domain(args.domain)
    inf.tta_reps, inf.seed = args.tta_reps, args.seed
    ckpts = find_checkpoints(args.ckpt)
    models = load_fold_models(ckpts)
    from .fusion import load_checkpoint

    cfg = load_checkpoint(ckpts[0])[1]
    inf.ssl_input = cfg.model.ssl.input
    if args.wav:
        score = predict_ensemble(models, load_audio(args.wav, cfg.audio.sample_rate), inf, cfg.audio, args.seed)
        print(f"{score:.6f}")
        return EXIT_OK
    manifest = read_manifest(args.manifest)
    res = predict_manifest(models, manifest, inf, cfg.audio)
    write_predictions(res.rows, args.out)
    for ds, utt, msg in res.errors:
        print(f"error {ds}/{utt}: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if res.partial else EXIT_OK


def _run_evaluate(args) -> int:
    preds = read_table(args.pred, "pred_mos")
    truths = read_table(args.truth, "mos")
    levels = ["utterance", "system"] if args.level == "both" else [args.level]
    zooms = args.zoom or [1.0]
    if args.clamp:
        preds["pred_mos"] = preds["pred_mos"].clip(1.0, 5.0)
    report = {"conditions": evaluate(preds, truths, levels, zooms, args.ktau_variant)}
    if args.out:
        write_report(report, Path(args.out))
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _run_ablate(args) -> int:
    report = cmd_ablate(load_config(args.config), args.arm)
    print(report["run_dir"])
    return EXIT_OK


def _run_pipeline(args) -> int:
    report = cmd_pipeline(load_config(args.config))
    print(report["run_dir"])
    return EXIT_PARTIAL if any(b["errors"] for b in report["blocks"]) else EXIT_OK


def _run_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mosfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw ratings -> manifest CSV")
    p.add_argument("--format", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--rules", default=None, help="comma-separated rules; default: per-format rules")
    p.add_argument("--out", required=True)
    p.add_argument("--no-check-audio", action="store_true")
    p.set_defaults(func=_run_ingest)

    p = sub.add_parser("train", help="cross-validated multi-stage training")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--arm", default="full", choices=["full", "no-ssl", "no-spec", "no-stage2", "only-stage3"])
    p.add_argument("--init-ckpt", help="continue from fold checkpoints (sequential fine-tuning)")
    p.add_argument("--stage", default="s3-finetune")
    p.set_defaults(func=_run_train)

    p = sub.add_parser("predict", help="TTA + fold-ensemble prediction")
    p.add_argument("--ckpt", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--wav")
    p.add_argument("--out")
    p.add_argument("--domain", default="BVCC", help="TOKEN, average:TOK1,TOK2 or off")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tta-reps", type=int, default=5)
    p.set_defaults(func=_run_predict)

    p = sub.add_parser("evaluate", help="utterance/system metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--level", default="both", choices=["both", "utterance", "system"])
    p.add_argument("--zoom", type=float, action="append")
    p.add_argument("--ktau-variant", default="b", choices=["a", "b"])
    p.add_argument("--clamp", action="store_true", help="clip predictions to [1, 5] before scoring")
    p.add_argument("--out")
    p.set_defaults(func=_run_evaluate)

    p = sub.add_parser("ablate", help="run one ablation arm")
    p.add_argument("--config", required=True)
    p.add_argument("--arm", required=True)
    p.set_defaults(func=_run_ablate)

    p = sub.add_parser("pipeline", help="end-to-end run from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_run_pipeline)

    p = sub.add_parser("schema", help="print the run-config JSON schema")
    p.set_defaults(func=_run_schema)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "predict" and args.manifest and not args.out:
        parser.error("--out is required with --manifest")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, AudioError, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
