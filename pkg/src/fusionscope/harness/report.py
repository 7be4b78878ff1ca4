"""Aggregate tables from run directories.

A run directory may contain

* ``evaluation/<dataset>__<model>.json`` written by ``evaluate``,
* ``xai/<dataset>__<method>.csv`` written by ``xai-eval``,
* ``coherence/<dataset>__<method>.csv`` written by ``coherence``.

:func:`emit_report` turns whatever is present into plot-ready tables.
"""
from __future__ import annotations

import enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..xaimetrics import class_adjusted_ds
from .classification import METRICS, ClassificationReport, aggregate_folds, roc_curve
from .tables import read_csv, read_json, write_csv, write_json

MODEL_ORDER = ("Global", "Local", "Fusion_Gate", "Fusion_Concat", "Fusion_Product")
XAI_COLUMNS = ("image_id", "method", "rma", "rra", "ds", "ds_0", "ds_1", "ds_c", "degenerate_flag")
ANNOTATION_COLUMNS = ("annotator", "image_id", "annotation_rma", "annotation_rra",
                      "saliency_rma", "saliency_rra", "degenerate_flag")


class ReportFormat(str, enum.Enum):
    CSV = "CSV"
    JSON = "JSON"


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("missing run artifacts: " + ", ".join(self.missing))


def split_stem(path: Path) -> tuple[str, str]:
    dataset, sep, name = path.stem.partition("__")
    if not sep:
        raise ValueError(f"{path.name}: expected '<dataset>__<name>' file name")
    return dataset, name


def _model_key(name: str):
    return (MODEL_ORDER.index(name), name) if name in MODEL_ORDER else (len(MODEL_ORDER), name)


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _collect(run_dirs: Sequence[Path], sub: str, pattern: str) -> dict[tuple[str, str], Path]:
    """First file per (dataset, name) key across ``run_dirs``."""
    found: dict[tuple[str, str], Path] = {}
    for run in run_dirs:
        for path in sorted((run / sub).glob(pattern)):
            found.setdefault(split_stem(path), path)
    return found


# --------------------------------------------------------------------------
# table builders
# --------------------------------------------------------------------------


def performance_rows(evaluations: dict[tuple[str, str], dict]) -> list[dict]:
    rows = []
    for (dataset, model) in sorted(evaluations, key=lambda k: (k[0], _model_key(k[1]))):
        folds = evaluations[(dataset, model)]["folds"]
        reports = [ClassificationReport.from_dict(f["report"]) for f in folds]
        row = {"dataset": dataset, "model": model, "n_folds": len(reports)}
        if len(reports) >= 2:
            summary = aggregate_folds(reports)
        else:
            summary = {m: (float(getattr(reports[0], m)), None) for m in METRICS}
        for m in METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = summary[m]
        rows.append(row)
    return rows


def performance_header() -> list[str]:
    return ["dataset", "model", "n_folds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]


def roc_rows(evaluation: dict) -> list[dict]:
    """Per-fold ROC points plus the curve over pooled out-of-fold predictions (``fold = all``)."""
    rows = []
    scores, labels = [], []
    for f in evaluation["folds"]:
        for fpr, tpr in f["report"]["roc_points"]:
            rows.append({"fold": f["fold"], "fpr": float(fpr), "tpr": float(tpr)})
        scores.extend(f["probabilities"])
        labels.extend(f["labels"])
    if len(set(labels)) == 2:
        for fpr, tpr in roc_curve(scores, labels):
            rows.append({"fold": "all", "fpr": fpr, "tpr": tpr})
    return rows


def _label(row: dict) -> Optional[int]:
    if row.get("ds_0") is not None:
        return 0
    if row.get("ds_1") is not None:
        return 1
    return None


def coherence_rows(xai: dict[tuple[str, str], list[dict]]) -> list[dict]:
    rows = []
    for (dataset, method), items in sorted(xai.items()):
        scored = [r for r in items if r.get("rma") is not None]
        rows.append({
            "dataset": dataset, "method": method, "n_images": len(scored),
            "rma_mean": _mean(r["rma"] for r in scored),
            "rra_mean": _mean(r["rra"] for r in scored),
            "n_degenerate": sum(int(r.get("degenerate_flag") or 0) for r in scored),
        })
    return rows


def degradation_rows(xai: dict[tuple[str, str], list[dict]], alpha: float = 1.0) -> list[dict]:
    rows = []
    for (dataset, method), items in sorted(xai.items()):
        by_class = {c: [r["ds"] for r in items if _label(r) == c and r.get("ds") is not None] for c in (0, 1)}
        row = {"dataset": dataset, "method": method, "n_images": len(items),
               "ds_mean": _mean(r.get("ds") for r in items),
               "ds_0": _mean(by_class[0]), "ds_1": _mean(by_class[1]),
               "delta": None, "ds_c": None, "alpha": float(alpha)}
        if by_class[0] and by_class[1]:
            res = class_adjusted_ds({0: row["ds_0"], 1: row["ds_1"]}, alpha)
            row["delta"], row["ds_c"] = res.delta, res.ds_c
        rows.append(row)
    return rows


def distribution_rows(xai: dict[tuple[str, str], list[dict]]) -> list[dict]:
    rows = []
    for (dataset, method), items in sorted(xai.items()):
        for r in sorted(items, key=lambda r: r["image_id"]):
            rows.append({"dataset": dataset, "method": method, "image_id": r["image_id"],
                         "label": _label(r), "ds": r.get("ds")})
    return rows


def annotation_rows(tables: dict[tuple[str, str], list[dict]]) -> list[dict]:
    rows = []
    for (dataset, method), items in sorted(tables.items()):
        for annotator in sorted({str(r["annotator"]) for r in items}):
            sel = [r for r in items if str(r["annotator"]) == annotator]
            rows.append({"dataset": dataset, "method": method, "annotator": annotator, "n_images": len(sel),
                         **{c: _mean(r[c] for r in sel) for c in ANNOTATION_COLUMNS[2:6]}})
    return rows


HEADERS = {
    "coherence": ["dataset", "method", "n_images", "rma_mean", "rra_mean", "n_degenerate"],
    "degradation": ["dataset", "method", "n_images", "ds_mean", "ds_0", "ds_1", "delta", "ds_c", "alpha"],
    "ds_distribution": ["dataset", "method", "image_id", "label", "ds"],
    "annotation_coherence": ["dataset", "method", "annotator", "n_images", *ANNOTATION_COLUMNS[2:6]],
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def load_xai_table(path: str | Path) -> list[dict]:
    header, rows = read_csv(path)
    if tuple(header) != XAI_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    return rows


def emit_report(run_dirs: str | Path | Iterable[str | Path], out_dir: str | Path,
                fmt: ReportFormat | str = ReportFormat.CSV, alpha: float = 1.0) -> list[Path]:
    """Write aggregate tables for the artifacts found in ``run_dirs``; returns the written paths.

    When the same ``(dataset, model)`` appears in several run directories the first one wins.
    """
    if isinstance(run_dirs, (str, Path)):
        run_dirs = [run_dirs]
    run_dirs = [Path(r) for r in run_dirs]
    fmt = ReportFormat(fmt.upper() if isinstance(fmt, str) else fmt)
    out_dir = Path(out_dir)

    missing = [str(r) for r in run_dirs if not r.is_dir()]
    if missing:
        raise MissingArtifactsError([f"run directory {m}" for m in missing])
    eval_files = _collect(run_dirs, "evaluation", "*__*.json")
    xai_files = _collect(run_dirs, "xai", "*__*.csv")
    ann_files = _collect(run_dirs, "coherence", "*__*.csv")
    if not eval_files and not xai_files and not ann_files:
        raise MissingArtifactsError([f"{r}/evaluation/<dataset>__<model>.json (from 'evaluate')" for r in run_dirs]
                                    + [f"{r}/xai/<dataset>__<method>.csv (from 'xai-eval')" for r in run_dirs])

    evaluations = {k: read_json(p) for k, p in eval_files.items()}
    xai = {k: load_xai_table(p) for k, p in xai_files.items()}
    ann = {k: read_csv(p, text_columns=("image_id", "annotator"))[1] for k, p in ann_files.items()}

    tables: dict[str, tuple[list[str], list[dict]]] = {}
    if evaluations:
        tables["performance"] = (performance_header(), performance_rows(evaluations))
        for (dataset, model), ev in sorted(evaluations.items()):
            tables[f"roc_{dataset}_{model}"] = (["fold", "fpr", "tpr"], roc_rows(ev))
    if xai:
        tables["coherence"] = (HEADERS["coherence"], coherence_rows(xai))
        tables["degradation"] = (HEADERS["degradation"], degradation_rows(xai, alpha))
        tables["ds_distribution"] = (HEADERS["ds_distribution"], distribution_rows(xai))
    if ann:
        tables["annotation_coherence"] = (HEADERS["annotation_coherence"], annotation_rows(ann))

    if fmt is ReportFormat.JSON:
        payload = {name: rows for name, (_, rows) in tables.items()}
        return [write_json(out_dir / "report.json", payload)]
    return [write_csv(out_dir / f"{name}.csv", header, rows) for name, (header, rows) in tables.items()]
