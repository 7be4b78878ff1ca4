"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (flags, config, manifest), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..dataio import ManifestError
from .config import OUT_ENV, ConfigError, load_config
from .report import ReportFormat, emit_report
from . import pipeline

log = logging.getLogger("fusionscope")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionscope", description="Dual-branch fusion classifier: training and XAI evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, type=Path, help="experiment TOML file")
        return sp

    sp = with_config(sub.add_parser("prepare-folds", help="patient-grouped k-fold assignment"), required=False)
    sp.add_argument("--manifest", type=Path, help="manifest CSV (defaults to the config's)")
    sp.add_argument("--k", type=_positive)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, help="output JSON (default <run dir>/folds.json)")

    sp = with_config(sub.add_parser("train", help="cross-validated training"))
    sp.add_argument("--fold", type=int, action="append", help="train only this fold (repeatable)")

    sp = with_config(sub.add_parser("evaluate", help="per-fold classification reports"))
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = with_config(sub.add_parser("saliency", help="export saliency maps"))
    sp.add_argument("--source", action="append", choices=sorted(pipeline.METHOD_SOURCES),
                    help="saliency source (repeatable; default: all sources of the model)")
    sp.add_argument("--reduction", choices=["MEAN_ABS", "L2"])
    sp.add_argument("--alpha", type=float, help="overlay opacity")
    sp.add_argument("--overlay", action="store_true", help="also write RGB overlays")
    sp.add_argument("--limit", type=_positive, help="at most this many images per fold")

    sp = with_config(sub.add_parser("xai-eval", help="RMA/RRA and degradation scores"))
    sp.add_argument("--method", required=True, choices=sorted(pipeline.METHOD_SOURCES) + ["external"])
    sp.add_argument("--steps", type=_positive)
    sp.add_argument("--workers", type=_positive, default=1)
    sp.add_argument("--tie-policy", choices=["EXPECTED", "STABLE"])
    sp.add_argument("--saliency-dir", type=Path, help="exported maps for --method external")
    sp.add_argument("--name", help="method name used in outputs")
    sp.add_argument("--limit", type=_positive)

    sp = with_config(sub.add_parser("coherence", help="annotation coherence against reference masks"),
                     required=False)
    sp.add_argument("--annotations", required=True, type=Path,
                    help="CSV: annotator,image_id,annotation_path,reference_path")
    sp.add_argument("--saliency-dir", required=True, type=Path)
    sp.add_argument("--tie-policy", choices=["EXPECTED", "STABLE"], default="EXPECTED")
    sp.add_argument("--out", type=Path, help="output CSV (default <run dir>/coherence/<dataset>__<method>.csv)")

    sp = with_config(sub.add_parser("report", help="aggregate tables"), required=False)
    sp.add_argument("--run-dir", type=Path, action="append", help="run directory (repeatable)")
    sp.add_argument("--format", choices=["CSV", "JSON"], default="CSV")
    sp.add_argument("--alpha", type=float, default=1.0, help="class-disparity penalty weight")
    sp.add_argument("--out", type=Path, help="output directory (default <run dir>/report)")
    return p


def _env_run_dir() -> Optional[Path]:
    env = os.environ.get(OUT_ENV)
    return Path(env) if env else None


def _run_dir(args) -> Path:
    if getattr(args, "config", None) is not None:
        return args.cfg.output_path
    env = _env_run_dir()
    if env is None:
        raise UsageError(f"--config or ${OUT_ENV} is required")
    return env


def cmd_prepare_folds(args) -> None:
    cfg = args.cfg
    manifest = args.manifest or (cfg.manifest_path if cfg else None)
    if manifest is None:
        raise UsageError("prepare-folds needs --manifest or --config")
    k = args.k if args.k is not None else (cfg.folds.k if cfg else 5)
    seed = args.seed if args.seed is not None else (cfg.folds.seed if cfg else 0)
    if k < 2:
        raise UsageError("--k must be at least 2")
    out = args.out or (_run_dir(args) / pipeline.FOLDS_FILE)
    names = cfg.dataset.class_names if cfg else None
    folds = pipeline.prepare_folds(manifest, k, seed, out, names)
    print(f"wrote {out} ({folds.k} folds, {len(folds.fold_of_sample)} samples)")


def cmd_train(args) -> None:
    results = pipeline.train(args.cfg, _run_dir(args), args.fold)
    for r in results:
        print(f"fold {r.fold}: best epoch {r.history.best_epoch}, checkpoint {r.checkpoint}")


def cmd_evaluate(args) -> None:
    for path in pipeline.evaluate(args.cfg, _run_dir(args), args.threshold):
        print(f"wrote {path}")


def cmd_saliency(args) -> None:
    written = pipeline.export_saliencies(args.cfg, _run_dir(args), args.source, args.reduction, args.alpha,
                                         args.overlay, args.limit)
    print(f"wrote {len(written)} files under {_run_dir(args) / 'saliency'}")


def cmd_xai_eval(args) -> None:
    if args.method == "external" and args.saliency_dir is None:
        raise UsageError("--method external requires --saliency-dir")
    out = pipeline.xai_eval(args.cfg, _run_dir(args), args.method, args.steps, args.workers, args.tie_policy,
                            args.saliency_dir, args.name, args.limit)
    print(f"wrote {out['table']} and {out['summary']}")


def cmd_coherence(args) -> None:
    out = args.out
    if out is None:
        dataset = args.cfg.dataset.name if args.cfg else "dataset"
        out = _run_dir(args) / "coherence" / f"{dataset}__{args.saliency_dir.name}.csv"
    print(f"wrote {pipeline.annotation_table(args.annotations, args.saliency_dir, out, args.tie_policy)}")


def cmd_report(args) -> None:
    runs = args.run_dir or [_run_dir(args)]
    out = args.out or (runs[0] / "report")
    for path in emit_report(runs, out, ReportFormat(args.format), args.alpha):
        print(f"wrote {path}")


COMMANDS = {
    "prepare-folds": cmd_prepare_folds, "train": cmd_train, "evaluate": cmd_evaluate,
    "saliency": cmd_saliency, "xai-eval": cmd_xai_eval, "coherence": cmd_coherence, "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.cfg = load_config(args.config) if getattr(args, "config", None) is not None else None
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run() -> None:
    sys.exit(main())
