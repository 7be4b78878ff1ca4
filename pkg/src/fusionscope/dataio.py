"""Dataset manifests, patient-grouped folds, image/mask loading and augmentation."""
from __future__ import annotations

import csv
import enum
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_COLUMNS = ["image_path", "label", "patient_id", "modality", "mask_path"]
IMAGE_SIZE = 224


class ManifestError(ValueError):
    pass


class Modality(str, enum.Enum):
    T1 = "T1"
    STIR = "STIR"
    ULTRASOUND = "ULTRASOUND"
    OTHER = "OTHER"


@dataclass
class SampleRecord:
    image_path: Path
    label: int
    patient_id: str
    modality: Modality = Modality.OTHER
    mask_path: Optional[Path] = None

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    class_names: list[str] = field(default_factory=lambda: ["class_0", "class_1"])

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> dict[int, int]:
        counts = Counter(s.label for s in self.samples)
        return {c: counts.get(c, 0) for c in (0, 1)}

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.samples[i] for i in indices], list(self.class_names))


def load_manifest(path: str | Path, class_names: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Parse a manifest CSV; relative paths are resolved against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} does not exist")
    root = path.parent
    samples, seen = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        for row_no, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in MANIFEST_COLUMNS):
                raise ManifestError(f"{path} row {row_no}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                label = int(row["label"])
            except ValueError:
                raise ManifestError(f"{path} row {row_no}: label {row['label']!r} is not an integer") from None
            if label not in (0, 1):
                raise ManifestError(f"{path} row {row_no}: label {label} outside {{0, 1}}")
            if not row["image_path"].strip():
                raise ManifestError(f"{path} row {row_no}: empty image_path")
            if not row["patient_id"].strip():
                raise ManifestError(f"{path} row {row_no}: empty patient_id")
            try:
                modality = Modality(row["modality"].strip().upper() or "OTHER")
            except ValueError:
                raise ManifestError(f"{path} row {row_no}: unknown modality {row['modality']!r}") from None
            image_path = root / row["image_path"].strip()
            if image_path in seen:
                raise ManifestError(f"{path} row {row_no}: duplicate image_path (first seen on row {seen[image_path]})")
            seen[image_path] = row_no
            mask = row["mask_path"].strip()
            samples.append(SampleRecord(image_path, label, row["patient_id"].strip(), modality,
                                        root / mask if mask else None))
    if not samples:
        raise ManifestError(f"{path}: manifest has no samples")
    return DatasetManifest(samples, list(class_names) if class_names else ["class_0", "class_1"])


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for s in manifest.samples:
            writer.writerow([rel(s.image_path), s.label, s.patient_id, s.modality.value,
                             rel(s.mask_path) if s.mask_path else ""])
    return path


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------


@dataclass
class FoldAssignment:
    k: int
    seed: int
    fold_of_sample: list[int]

    @property
    def folds(self) -> dict[int, list[int]]:
        out = {f: [] for f in range(self.k)}
        for i, f in enumerate(self.fold_of_sample):
            out[f].append(i)
        return out

    def split(self, fold: int) -> tuple[list[int], list[int]]:
        """(train indices, validation indices) for ``fold``."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside [0, {self.k})")
        train = [i for i, f in enumerate(self.fold_of_sample) if f != fold]
        val = [i for i, f in enumerate(self.fold_of_sample) if f == fold]
        return train, val

    def to_json(self) -> str:
        folds = {str(f): idx for f, idx in self.folds.items()}
        return json.dumps({"k": self.k, "seed": self.seed, "folds": folds}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        d = json.loads(text)
        n = sum(len(v) for v in d["folds"].values())
        fold_of_sample = [-1] * n
        for f, idx in d["folds"].items():
            for i in idx:
                fold_of_sample[i] = int(f)
        if -1 in fold_of_sample:
            raise ValueError("fold file does not cover every sample index exactly once")
        return cls(int(d["k"]), int(d["seed"]), fold_of_sample)


def assign_patient_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldAssignment:
    """Deal whole patients to ``k`` folds.

    Patients are shuffled with ``seed``, ordered by descending sample count
    (stable, so the shuffle breaks ties) and each is placed in the currently
    smallest fold (lowest fold id on ties).
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    by_patient: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(manifest.samples):
        by_patient[s.patient_id].append(i)
    if len(by_patient) < k:
        raise ValueError(f"{len(by_patient)} patients cannot fill {k} folds")
    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    shuffled.sort(key=lambda p: -len(by_patient[p]))
    sizes = [0] * k
    fold_of_sample = [0] * len(manifest)
    for p in shuffled:
        f = min(range(k), key=lambda j: (sizes[j], j))
        for i in by_patient[p]:
            fold_of_sample[i] = f
        sizes[f] += len(by_patient[p])
    return FoldAssignment(k, seed, fold_of_sample)


# --------------------------------------------------------------------------
# images and masks
# --------------------------------------------------------------------------


def _decode(path: Path) -> np.ndarray:
    """Decode to float64 in [0, 1], shape (H, W) or (H, W, 3)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I;16N"):
                arr = np.array(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                arr = np.array(im, dtype=np.float64)
                arr = arr / (65535.0 if arr.max() > 255 else 255.0)
            elif mode == "F":
                arr = np.clip(np.array(im, dtype=np.float64), 0, 1)
            elif mode in ("L", "1"):
                arr = np.array(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.array(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.size == 0 or 0 in arr.shape[:2]:
        raise ValueError(f"image {path} has zero size")
    return arr


def _resize_bilinear(channel: np.ndarray, size: int) -> np.ndarray:
    if channel.shape == (size, size):
        return channel
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)


def load_image(record: SampleRecord | str | Path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode, replicate grayscale to 3 channels, resize to ``size`` x ``size``; float32 (3, H, W) in [0, 1]."""
    path = Path(getattr(record, "image_path", record))
    if not path.is_file():
        raise FileNotFoundError(f"image {path} does not exist")
    arr = _decode(path)
    channels = [arr] * 3 if arr.ndim == 2 else [arr[..., c] for c in range(3)]
    out = np.stack([_resize_bilinear(c, size) for c in channels])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def load_mask(path: str | Path, target: tuple[int, int]) -> np.ndarray:
    """Threshold at the midpoint of the intensity range, nearest-neighbour resize; uint8 {0, 1}."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask {path} does not exist")
    arr = _decode(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        binary = (arr > (lo + hi) / 2).astype(np.uint8)
    else:
        binary = np.full(arr.shape, 1 if hi > 0 else 0, dtype=np.uint8)
    h, w = target
    if binary.shape != (h, w):
        binary = np.asarray(Image.fromarray(binary * 255).resize((w, h), Image.NEAREST)) // 255
    return binary.astype(np.uint8)


def save_image(image: np.ndarray, path: str | Path, bits: int = 8) -> Path:
    """Write a (3, H, W) or (H, W) image in [0, 1] as 8- or 16-bit grayscale/RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if np.allclose(arr, arr[:1]) else np.moveaxis(arr, 0, -1)
    if bits == 16:
        if arr.ndim == 3:
            raise ValueError("16-bit export supports grayscale only")
        Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)
    return Path(path)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip: bool = False
    rotate: bool = False
    jitter: bool = False
    flip_p: float = 0.5
    max_rotation: float = 10.0
    max_jitter: float = 0.1

    @classmethod
    def default(cls) -> "AugmentConfig":
        return cls(flip=True, rotate=True, jitter=True)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, small rotation and multiplicative intensity jitter."""
    out = np.asarray(image)
    if config.flip and rng.random() < config.flip_p:
        out = out[..., ::-1]
    if config.rotate and config.max_rotation > 0:
        angle = rng.uniform(-config.max_rotation, config.max_rotation)
        if angle != 0:
            out = ndimage.rotate(out, angle, axes=(-2, -1), reshape=False, order=1, mode="nearest")
    if config.jitter and config.max_jitter > 0:
        out = np.clip(out * rng.uniform(1 - config.max_jitter, 1 + config.max_jitter), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.asarray(image).dtype)


def load_split(manifest: DatasetManifest, indices: Sequence[int], size: int = IMAGE_SIZE):
    """Stack images and labels for ``indices``; masks (or None) come back as a list."""
    images = np.stack([load_image(manifest.samples[i], size) for i in indices]) if len(indices) else \
        np.zeros((0, 3, size, size), np.float32)
    labels = np.array([manifest.samples[i].label for i in indices], dtype=np.int64)
    masks = [load_mask(manifest.samples[i].mask_path, (size, size)) if manifest.samples[i].mask_path else None
             for i in indices]
    return images, labels, masks
