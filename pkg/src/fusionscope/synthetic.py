"""Synthetic "bright blob vs. none" dataset with recorded blob masks."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image


def make_blob_image(rng: np.random.Generator, size: int = 64, blob: bool = True,
                    radius_range: tuple[float, float] = (6.0, 10.0)):
    """Return ``(image, mask)`` as float arrays in [0, 1]; ``mask`` is all-zero without a blob."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.15, 0.35)
    image = base + 0.08 * rng.standard_normal((size, size))
    # low-frequency shading so the background is not trivially flat
    phase = rng.uniform(0, 2 * np.pi, size=2)
    image += 0.05 * np.sin(2 * np.pi * xx / size + phase[0]) * np.cos(2 * np.pi * yy / size + phase[1])
    mask = np.zeros((size, size), dtype=np.uint8)
    if blob:
        r = rng.uniform(*radius_range)
        margin = int(np.ceil(r)) + 2
        cy, cx = rng.uniform(margin, size - margin, size=2)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r).astype(np.uint8)
        image += rng.uniform(0.35, 0.5) * mask
    return np.clip(image, 0.0, 1.0), mask


def write_blob_dataset(root: str | Path, n_images: int = 400, size: int = 64, seed: int = 0,
                       samples_per_patient: int = 2) -> Path:
    """Write PNG images, PNG masks (positives only) and ``manifest.csv`` under ``root``.

    Classes alternate so the set is balanced; consecutive images share a
    synthetic patient id in groups of ``samples_per_patient``.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_images):
        label = i % 2
        image, mask = make_blob_image(rng, size=size, blob=bool(label))
        image_path = root / "images" / f"img_{i:04d}.png"
        Image.fromarray(np.round(image * 255).astype(np.uint8)).save(image_path)
        mask_path = ""
        if label:
            mask_path = root / "masks" / f"img_{i:04d}.png"
            Image.fromarray(mask * 255).save(mask_path)
            mask_path = str(mask_path.relative_to(root))
        rows.append({
            "image_path": str(image_path.relative_to(root)),
            "label": label,
            "patient_id": f"p{i // samples_per_patient:04d}",
            "modality": "OTHER",
            "mask_path": mask_path,
        })
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_path", "label", "patient_id", "modality", "mask_path"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def blob_experiment(manifest: str | Path, output_dir: str | Path, seed: int = 0, max_epochs: int = 60) -> dict:
    """Experiment settings (the TOML schema as a dict) for the blob set with tiny backbones.

    The gate uses spatial softmax normalisation: on this task a sigmoid gate
    saturates over the whole positive image and stops localising.
    """
    return {
        "output_dir": str(output_dir),
        "seed": seed,
        "dataset": {"name": "blobs", "manifest": str(manifest), "image_size": 64},
        "folds": {"k": 5, "seed": seed},
        "backbones": {
            "global": {"kind": "GLOBAL_RESNET_STYLE", "preset": "tiny"},
            "local": {"kind": "LOCAL_BAGNET_STYLE", "preset": "tiny"},
        },
        "fusion": {"strategy": "gate", "gate_norm": "SOFTMAX", "fuse_channels": 64},
        "train": {"lr_g": 0.01, "lr_l": 0.01, "lr_f": 0.05, "wd_g": 4e-4, "wd_l": 4e-4, "wd_f": 4e-4,
                  "dropout_fusion": 0.25, "batch_size": 16, "max_epochs": max_epochs, "patience": 10,
                  "lr_step": 20},
        "augment": {"flip": False, "rotate": False, "jitter": False},
    }
