"""Pipeline stages behind the CLI: folds, training, evaluation, saliency export and XAI scoring."""
from __future__ import annotations

import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..dataio import DatasetManifest, FoldAssignment, assign_patient_folds, load_image, load_manifest, load_mask
from ..fusion import FusionStrategy
from ..model import DualBranchNet, ModelConfig
from ..saliency import (GridGeometry, Reduction, SaliencyMap, SaliencySource, export_saliency, import_saliency,
                        model_saliency, save_overlay)
from ..training import load_checkpoint, model_hash, predict, run_cross_validation
from ..xaimetrics import TiePolicy, annotation_coherence, coherence, image_degradation
from .classification import classification_metrics
from .config import ConfigError, ExperimentConfig
from .report import ANNOTATION_COLUMNS, XAI_COLUMNS, coherence_rows, degradation_rows
from .tables import read_csv, write_csv, write_json

log = logging.getLogger(__name__)

FOLDS_FILE = "folds.json"

METHOD_SOURCES = {
    "global": SaliencySource.GLOBAL,
    "local": SaliencySource.LOCAL,
    "fusion_gate": SaliencySource.FUSION_GATE,
    "fusion_concat": SaliencySource.FUSION_CONCAT,
    "fusion_product": SaliencySource.FUSION_PRODUCT,
}
STRATEGY_METHOD = {FusionStrategy.GATE: "fusion_gate", FusionStrategy.CONCAT: "fusion_concat",
                   FusionStrategy.PRODUCT: "fusion_product"}


def method_branch(method: str) -> str:
    """Classifier head whose probability an occlusion curve follows."""
    return method if method in ("global", "local") else "fusion"


def display_name(method: str) -> str:
    """``fusion_gate`` -> ``Fusion_Gate``."""
    return "_".join(part.capitalize() for part in method.split("_"))


def model_methods(config: ModelConfig) -> list[str]:
    return ["global", "local", STRATEGY_METHOD[FusionStrategy(config.strategy)]]


def check_method(config: ModelConfig, method: str) -> None:
    if method not in model_methods(config):
        raise ConfigError(f"method {method!r} is not produced by a {FusionStrategy(config.strategy).value} model; "
                         f"choose one of {model_methods(config)}")


def source_geometry(config: ModelConfig, source: SaliencySource) -> GridGeometry:
    """Feature cell ``o`` is centred on input pixel ``total_stride * o`` (symmetric padding)."""
    backbone = config.global_backbone if source is SaliencySource.GLOBAL else config.local_backbone
    return GridGeometry(stride=float(backbone.total_stride), offset=0.0)


def geometry_for(config: ModelConfig, source: SaliencySource, mode: str) -> Optional[GridGeometry]:
    return source_geometry(config, source) if mode == "receptive_field" else None


# --------------------------------------------------------------------------
# folds and run layout
# --------------------------------------------------------------------------


def prepare_folds(manifest_path: str | Path, k: int, seed: int, out_path: str | Path,
                  class_names: Optional[Sequence[str]] = None) -> FoldAssignment:
    manifest = load_manifest(manifest_path, class_names)
    folds = assign_patient_folds(manifest, k, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(folds.to_json(), encoding="utf-8")
    return folds


def load_folds(run_dir: Path, manifest: DatasetManifest) -> FoldAssignment:
    path = run_dir / FOLDS_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'prepare-folds' first")
    folds = FoldAssignment.from_json(path.read_text(encoding="utf-8"))
    if len(folds.fold_of_sample) != len(manifest):
        raise ValueError(f"{path} covers {len(folds.fold_of_sample)} samples, manifest has {len(manifest)}")
    return folds


def checkpoint_path(run_dir: Path, fold: int) -> Path:
    return run_dir / f"fold_{fold}" / "model.pt"


def available_folds(run_dir: Path, folds: FoldAssignment) -> list[int]:
    present = [f for f in range(folds.k) if checkpoint_path(run_dir, f).is_file()]
    if not present:
        raise FileNotFoundError(f"no fold checkpoints under {run_dir}; run 'train' first")
    return present


def load_fold_model(run_dir: Path, fold: int) -> DualBranchNet:
    model = load_checkpoint(checkpoint_path(run_dir, fold))
    model.eval()
    return model


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------


def train(cfg: ExperimentConfig, run_dir: Path, only_folds: Optional[Sequence[int]] = None):
    manifest = load_manifest(cfg.manifest_path, cfg.dataset.class_names)
    if not (run_dir / FOLDS_FILE).is_file():
        prepare_folds(cfg.manifest_path, cfg.folds.k, cfg.folds.seed, run_dir / FOLDS_FILE, cfg.dataset.class_names)
    folds = load_folds(run_dir, manifest)
    only = only_folds if only_folds is not None else cfg.folds.only
    return run_cross_validation(manifest, folds, cfg.model_config_obj(), cfg.train_config(), run_dir,
                                cfg.augment_config(), only)


def evaluate(cfg: ExperimentConfig, run_dir: Path, threshold: float = 0.5) -> list[Path]:
    """Per-fold classification reports for every branch of the trained models."""
    manifest = load_manifest(cfg.manifest_path, cfg.dataset.class_names)
    folds = load_folds(run_dir, manifest)
    per_method: dict[str, list[dict]] = {}
    for fold in available_folds(run_dir, folds):
        model = load_fold_model(run_dir, fold)
        _, val_idx = folds.split(fold)
        images = np.stack([load_image(manifest.samples[i], model.config.input_size) for i in val_idx])
        labels = manifest.labels[val_idx]
        probs = predict(model, images)
        for method in model_methods(model.config):
            p1 = probs[method_branch(method)][:, 1]
            report = classification_metrics(p1, labels, threshold)
            per_method.setdefault(method, []).append({
                "fold": fold, "report": report.to_dict(),
                "image_ids": [manifest.samples[i].image_id for i in val_idx],
                "labels": labels.tolist(), "probabilities": p1.tolist(),
            })
    paths = []
    for method, records in per_method.items():
        name = display_name(method)
        paths.append(write_json(run_dir / "evaluation" / f"{cfg.dataset.name}__{name}.json",
                                {"dataset": cfg.dataset.name, "model": name, "threshold": threshold,
                                 "folds": records}))
    return paths


# --------------------------------------------------------------------------
# saliency
# --------------------------------------------------------------------------


@dataclass
class ImageItem:
    index: int
    image_id: str
    label: int
    fold: int
    image: np.ndarray
    mask: Optional[np.ndarray]


def iter_items(manifest: DatasetManifest, folds: FoldAssignment, fold_list: Sequence[int], size: int,
               limit: Optional[int] = None) -> list[ImageItem]:
    """Out-of-fold images for the folds in ``fold_list``, sorted by image id."""
    wanted = set(fold_list)
    idx = [i for i, f in enumerate(folds.fold_of_sample) if f in wanted]
    idx.sort(key=lambda i: manifest.samples[i].image_id)
    if limit is not None:
        idx = idx[:limit]
    items = []
    for i in idx:
        s = manifest.samples[i]
        mask = load_mask(s.mask_path, (size, size)) if s.mask_path else None
        items.append(ImageItem(i, s.image_id, s.label, folds.fold_of_sample[i], load_image(s, size), mask))
    return items


@torch.no_grad()
def forward_one(model: DualBranchNet, image: np.ndarray) -> dict:
    return model(torch.as_tensor(image[None], dtype=torch.float32))


def export_saliencies(cfg: ExperimentConfig, run_dir: Path, methods: Optional[Sequence[str]] = None,
                      reduction: Optional[str] = None, alpha: Optional[float] = None,
                      overlays: bool = False, limit: Optional[int] = None) -> list[Path]:
    """16-bit PNG plus sidecar per image per source under ``saliency/<method>/``."""
    manifest = load_manifest(cfg.manifest_path, cfg.dataset.class_names)
    folds = load_folds(run_dir, manifest)
    reduction = Reduction(reduction or cfg.saliency.reduction)
    alpha = cfg.saliency.overlay_alpha if alpha is None else alpha
    written = []
    for fold in available_folds(run_dir, folds):
        model = load_fold_model(run_dir, fold)
        chosen = list(methods) if methods else model_methods(model.config)
        for m in chosen:
            check_method(model.config, m)
        digest = model_hash(model)
        size = model.config.input_size
        for item in iter_items(manifest, folds, [fold], size, limit):
            out = forward_one(model, item.image)
            for m in chosen:
                src = METHOD_SOURCES[m]
                sal = model_saliency(out, src, 0, (size, size), reduction,
                                     geometry_for(model.config, src, cfg.saliency.upsample), item.image_id)
                written.append(export_saliency(sal, run_dir / "saliency" / m / f"{item.image_id}.png", digest))
                if overlays:
                    written.append(save_overlay(run_dir / "saliency" / m / "overlays" / f"{item.image_id}.png",
                                                item.image, sal.data, alpha))
    return written


# --------------------------------------------------------------------------
# XAI scoring
# --------------------------------------------------------------------------


def probability_fn(model: DualBranchNet, branch: str, lock: Optional[threading.Lock] = None):
    """Black-box ``(B, C, H, W) -> (B, n_classes)`` probability function; calls serialized by ``lock``."""
    lock = lock or threading.Lock()

    def fn(batch: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
        with lock, torch.no_grad():
            return torch.softmax(model(x)[branch], dim=-1).double().numpy()
    return fn


def image_seed(base: int, image_id: str) -> int:
    """Tie-break seed that depends only on the image, not on processing order."""
    return (base * 1_000_003 + zlib.crc32(image_id.encode())) % (2 ** 32)


SaliencyProvider = Callable[[ImageItem, dict], SaliencyMap]


def xai_eval(cfg: ExperimentConfig, run_dir: Path, method: str, steps: Optional[int] = None,
             workers: int = 1, tie_policy: Optional[str] = None, saliency_dir: Optional[Path] = None,
             method_name: Optional[str] = None, limit: Optional[int] = None) -> dict[str, Path]:
    """RMA/RRA against masks and MoRF/LeRF degradation for out-of-fold images.

    ``method`` is a model saliency source or ``external``, which reads
    ``<saliency_dir>/<image_id>.png`` (the import format) and follows the fusion head.
    Returns the paths of the per-image CSV, the summary CSV and the curve directory.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    m = cfg.metrics
    steps = steps or m.steps
    tie = TiePolicy(tie_policy or m.tie_policy)
    external = method == "external"
    if external and saliency_dir is None:
        raise ValueError("method 'external' needs a saliency directory")
    if not external and method not in METHOD_SOURCES:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHOD_SOURCES) + ['external']}")
    name = method_name or (Path(saliency_dir).name if external else method)

    manifest = load_manifest(cfg.manifest_path, cfg.dataset.class_names)
    folds = load_folds(run_dir, manifest)
    fold_list = available_folds(run_dir, folds)
    models = {f: load_fold_model(run_dir, f) for f in fold_list}
    size = models[fold_list[0]].config.input_size
    if not external:
        for model in models.values():
            check_method(model.config, method)
    items = iter_items(manifest, folds, fold_list, size, limit)
    if not items:
        raise ValueError("no images to evaluate")

    lock = threading.Lock()
    branch = "fusion" if external else method_branch(method)
    fns = {f: probability_fn(models[f], branch, lock) for f in fold_list}
    curve_dir = run_dir / "xai" / "curves" / f"{cfg.dataset.name}__{name}"

    def saliency_of(item: ImageItem) -> SaliencyMap:
        if external:
            sal = import_saliency(Path(saliency_dir) / f"{item.image_id}.png")
            if sal.shape != (size, size):
                raise ValueError(f"external saliency for {item.image_id} is {sal.shape}, expected {(size, size)}")
            return sal
        model = models[item.fold]
        with lock:
            out = forward_one(model, item.image)
        src = METHOD_SOURCES[method]
        return model_saliency(out, src, 0, (size, size), Reduction(cfg.saliency.reduction),
                              geometry_for(model.config, src, cfg.saliency.upsample), item.image_id)

    def score(item: ImageItem) -> dict:
        sal = saliency_of(item)
        row = {"image_id": item.image_id, "method": name}
        if item.mask is not None and item.mask.any():
            c = coherence(sal.data, item.mask, tie)
            row.update(rma=c.rma, rra=c.rra, degenerate_flag=int(c.degenerate))
        deg = image_degradation(fns[item.fold], item.image, sal.data, item.label, steps, tie,
                                image_seed(m.seed, item.image_id), m.blur_kernel, m.blur_sigma)
        row["ds"] = deg.ds
        row[f"ds_{item.label}"] = deg.ds
        write_json(curve_dir / f"{item.image_id}.json",
                   {"image_id": item.image_id, "method": name, "class_id": item.label, "ds": deg.ds,
                    "morf": deg.morf.to_dict(), "lerf": deg.lerf.to_dict()})
        return row

    if workers == 1:
        rows = [score(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, items))
    rows.sort(key=lambda r: r["image_id"])

    table = write_csv(run_dir / "xai" / f"{cfg.dataset.name}__{name}.csv", XAI_COLUMNS, rows)
    keyed = {(cfg.dataset.name, name): rows}
    coh, deg = coherence_rows(keyed)[0], degradation_rows(keyed, m.alpha)[0]
    summary_row = {**{k: v for k, v in deg.items()}, "rma_mean": coh["rma_mean"], "rra_mean": coh["rra_mean"],
                   "n_masked": coh["n_images"], "n_degenerate": coh["n_degenerate"], "steps": steps,
                   "tie_policy": tie.value}
    summary_header = ["dataset", "method", "n_images", "n_masked", "n_degenerate", "rma_mean", "rra_mean",
                      "ds_mean", "ds_0", "ds_1", "delta", "ds_c", "alpha", "steps", "tie_policy"]
    summary = write_csv(run_dir / "xai" / "summary" / f"{cfg.dataset.name}__{name}.csv", summary_header,
                        [summary_row])
    return {"table": table, "summary": summary, "curves": curve_dir}


# --------------------------------------------------------------------------
# annotation coherence
# --------------------------------------------------------------------------


ANNOTATION_INPUT = ("annotator", "image_id", "annotation_path", "reference_path")


def annotation_table(annotations_csv: str | Path, saliency_dir: str | Path, out_path: str | Path,
                     tie_policy: str = "EXPECTED") -> Path:
    """Score human annotations against reference masks and exported saliency maps.

    ``annotations_csv`` has columns ``annotator,image_id,annotation_path,reference_path``
    (paths relative to the CSV); saliency maps are read from ``<saliency_dir>/<image_id>.png``.
    """
    annotations_csv = Path(annotations_csv)
    if not annotations_csv.is_file():
        raise FileNotFoundError(f"annotation table {annotations_csv} does not exist")
    header, rows = read_csv(annotations_csv, typed=False)
    if tuple(header) != ANNOTATION_INPUT:
        raise ValueError(f"{annotations_csv}: expected columns {','.join(ANNOTATION_INPUT)}, got {','.join(header)}")
    base = annotations_csv.parent
    out = []
    for r in rows:
        sal = import_saliency(Path(saliency_dir) / f"{r['image_id']}.png")
        ann = load_mask(base / r["annotation_path"], sal.shape)
        ref = load_mask(base / r["reference_path"], sal.shape)
        scores = annotation_coherence(ann, ref, sal.data, tie_policy)
        out.append({"annotator": r["annotator"], "image_id": r["image_id"],
                    **{k: scores[k] for k in ANNOTATION_COLUMNS[2:6]},
                    "degenerate_flag": int(scores["degenerate"])})
    out.sort(key=lambda r: (r["annotator"], r["image_id"]))
    return write_csv(out_path, ANNOTATION_COLUMNS, out)
