import csv
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from fusionscope.backbones import tiny_config
from fusionscope.model import ModelConfig

MANIFEST_HEADER = ["image_path", "label", "patient_id", "modality", "mask_path"]


def write_manifest_rows(path: Path, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return path


def write_png(path: Path, array: np.ndarray, mode=None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode=mode).save(path) if mode else Image.fromarray(array).save(path)
    return path


def tiny_model_config(strategy="gate", input_size=64, **kw) -> ModelConfig:
    return ModelConfig(tiny_config("GLOBAL_RESNET_STYLE"), tiny_config("LOCAL_BAGNET_STYLE"),
                       strategy=strategy, input_size=input_size, fuse_channels=kw.pop("fuse_channels", 4), **kw)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
