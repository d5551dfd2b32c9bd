"""Command-line surface tying corpus generation, training, and evaluation together.

Every subcommand accepts --config FILE plus any number of --key=value
overrides of training-config fields (underscored names).  VAEMO_SEED in
the environment overrides the configured seed.  Exit codes: 0 success,
2 usage or configuration errors, 3 data errors, 4 numeric aborts.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .backbone import build_params, count_params
from .captions import LiveClient, ReplayClient, StubClient, caption_corpus, coverage_subset
from .config import resolve_config
from .data import load_corpus, load_manifest, synth_corpus
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DATA_ERRORS,
    NUMERIC_ERRORS,
    USAGE_ERRORS,
)
from .pipeline import (
    STAGE1_FINAL,
    STAGE2_FINAL,
    evaluate_folds,
    export_embeddings,
    finetune_run,
    train_stage1,
    train_stage2,
)

LOCK_NAME = ".lock"


@contextmanager
def run_lock(directory: Path):
    """Single-writer guard on a run directory via an O_EXCL lock file."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(
            f"run directory {directory} is already in use; remove {lock} if stale"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vaemo",
        description="Two-stage audio-visual emotion representation learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("synth-data", help="generate the synthetic paired corpus")
    common(p)
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("gen-captions", help="caption an existing corpus")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--mode", choices=("stub", "replay", "live"), default="stub")
    p.add_argument("--fixture-dir", default=None, help="replay fixtures root")
    p.add_argument("--endpoint", default=None, help="live captioning endpoint URL")
    p.add_argument("--record-dir", default=None, help="record live replies as fixtures")

    p = sub.add_parser("pretrain-stage1", help="masked reconstruction pre-training")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--resume", default=None, help="epoch checkpoint to resume from")

    p = sub.add_parser("inject-stage2", help="caption knowledge injection")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--stage1-ckpt", default=None)
    p.add_argument("--subset-fraction", type=float, default=None)

    p = sub.add_parser("finetune", help="supervised fine-tuning on one fold split")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--fold", type=int, default=None)

    p = sub.add_parser("evaluate", help="cross-validated fine-tuning and pooled metrics")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--folds", default=None, help="comma-separated fold list, e.g. 0,1,2")

    p = sub.add_parser("export-embeddings", help="write pooled representations")
    common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("count-params", help="report parameter counts for the configured model")
    common(p)

    return parser


def _paths(args, cfg) -> tuple[Path, Path]:
    data_dir = Path(args.data_dir if getattr(args, "data_dir", None) else cfg.data_dir)
    run_dir = Path(args.run_dir if getattr(args, "run_dir", None) else cfg.run_dir)
    return data_dir, run_dir


def _cmd_synth_data(args, cfg) -> int:
    data_dir, _ = _paths(args, cfg)
    with run_lock(data_dir):
        rows = synth_corpus(data_dir, cfg.corpus(), cfg.seed)
    print(f"wrote {len(rows)} samples to {data_dir}")
    return 0


def _cmd_gen_captions(args, cfg) -> int:
    data_dir, _ = _paths(args, cfg)
    rows = load_manifest(data_dir / "manifest.jsonl")
    if args.mode == "stub":
        latents = {}
        for row in rows:
            label = row.get("label")
            if not label:
                raise DataError(
                    f"stub captioning needs labels in the manifest; sample {row['sample_id']!r} has none"
                )
            latents[row["sample_id"]] = label
        client = StubClient(
            latents, confusion_rate=cfg.caption_confusion, n_classes=cfg.n_classes
        )
    elif args.mode == "replay":
        if not args.fixture_dir:
            raise ConfigError("--fixture-dir is required in replay mode")
        client = ReplayClient(args.fixture_dir)
    else:
        if not args.endpoint:
            raise ConfigError("--endpoint is required in live mode")
        client = LiveClient(args.endpoint, record_dir=args.record_dir)
    covered = coverage_subset([row["sample_id"] for row in rows], cfg.caption_coverage, cfg.seed)
    with run_lock(data_dir):
        records, vectors = caption_corpus(
            client,
            covered,
            data_dir,
            passes=cfg.caption_passes,
            d_text=cfg.text_dim,
        )
    kept = sum(1 for r in records if not r.filtered)
    print(f"captioned {len(covered)} samples ({args.mode}); kept {kept}/{len(records)} records")
    return 0


def _cmd_pretrain_stage1(args, cfg) -> int:
    data_dir, run_dir = _paths(args, cfg)
    corpus = load_corpus(data_dir)
    with run_lock(run_dir):
        final = train_stage1(corpus, cfg, run_dir, resume_from=args.resume)
    print(f"stage-1 checkpoint: {final}")
    return 0


def _cmd_inject_stage2(args, cfg) -> int:
    import dataclasses

    data_dir, run_dir = _paths(args, cfg)
    if args.subset_fraction is not None:
        cfg = dataclasses.replace(cfg, subset_fraction=args.subset_fraction)
    corpus = load_corpus(data_dir)
    stage1_ckpt = Path(args.stage1_ckpt) if args.stage1_ckpt else run_dir / STAGE1_FINAL
    with run_lock(run_dir):
        final = train_stage2(corpus, cfg, run_dir, stage1_ckpt)
    print(f"stage-2 checkpoint: {final}")
    return 0


def _default_ckpt(run_dir: Path) -> Path:
    stage2 = run_dir / STAGE2_FINAL
    return stage2 if stage2.exists() else run_dir / STAGE1_FINAL


def _cmd_finetune(args, cfg) -> int:
    data_dir, run_dir = _paths(args, cfg)
    corpus = load_corpus(data_dir)
    ckpt = Path(args.ckpt) if args.ckpt else _default_ckpt(run_dir)
    fold = cfg.test_fold if args.fold is None else args.fold
    with run_lock(run_dir):
        result = finetune_run(corpus, cfg, ckpt, fold, run_dir=run_dir)
    if cfg.task == "categorical":
        correct = sum(1 for a, b in zip(result.labels, result.preds) if a == b)
        print(f"fold {fold}: {correct}/{len(result.sample_ids)} correct")
    else:
        print(f"fold {fold}: {len(result.sample_ids)} samples regressed")
    return 0


def _cmd_evaluate(args, cfg) -> int:
    data_dir, run_dir = _paths(args, cfg)
    corpus = load_corpus(data_dir)
    ckpt = Path(args.ckpt) if args.ckpt else _default_ckpt(run_dir)
    folds = None
    if args.folds:
        folds = [int(part) for part in args.folds.split(",") if part != ""]
    with run_lock(run_dir):
        report = evaluate_folds(corpus, cfg, ckpt, run_dir, folds=folds)
    if report.task == "categorical":
        print(f"pooled UAR {report.uar:.4f}  WAR {report.war:.4f}")
    else:
        dims = " ".join(f"{v:.4f}" for v in report.pcc_per_dim)
        print(f"pooled PCC per dim: {dims}")
    print(f"report: {run_dir / 'eval_report.json'}")
    return 0


def _cmd_export_embeddings(args, cfg) -> int:
    data_dir, run_dir = _paths(args, cfg)
    corpus = load_corpus(data_dir)
    ckpt = Path(args.ckpt) if args.ckpt else _default_ckpt(run_dir)
    out = Path(args.out) if args.out else run_dir / "embeddings.vaem"
    path = export_embeddings(corpus, cfg, ckpt, out)
    print(f"embeddings: {path}")
    return 0


def _cmd_count_params(args, cfg) -> int:
    store = build_params(
        cfg.backbone(),
        cfg.seed,
        include_decoder=True,
        include_adapters=True,
        head_classes=cfg.n_classes,
    )
    repr_count = count_params(store, "repr")
    print(f"representation_parameters {repr_count}")
    print(f"decoder_parameters {count_params(store, 'decoder.')}")
    print(f"adapter_parameters {count_params(store, 'adapter.')}")
    print(f"total_parameters {count_params(store, 'all')}")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "gen-captions": _cmd_gen_captions,
    "pretrain-stage1": _cmd_pretrain_stage1,
    "inject-stage2": _cmd_inject_stage2,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "export-embeddings": _cmd_export_embeddings,
    "count-params": _cmd_count_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args.config, overrides=extras)
        return _COMMANDS[args.command](args, cfg)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NUMERIC_ERRORS as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
