"""Saliency maps from feature maps and attention coefficients.

Every map is reduced to one channel, min-max normalised to [0, 1] (a constant
grid becomes all zeros) and bilinearly upsampled to the input resolution.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates


class SaliencySource(str, enum.Enum):
    GLOBAL = "GLOBAL"
    LOCAL = "LOCAL"
    FUSION_GATE = "FUSION_GATE"
    FUSION_CONCAT = "FUSION_CONCAT"
    FUSION_PRODUCT = "FUSION_PRODUCT"
    EXTERNAL = "EXTERNAL"


class Reduction(str, enum.Enum):
    MEAN_ABS = "MEAN_ABS"
    L2 = "L2"


@dataclass
class SaliencyMap:
    data: np.ndarray
    source: SaliencySource = SaliencySource.EXTERNAL
    image_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.source = SaliencySource(self.source)
        if self.data.ndim != 2:
            raise ValueError(f"saliency must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("saliency contains non-finite values")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("saliency values must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class GridGeometry:
    """Where grid cell ``o`` sits in input pixels: ``offset + stride * o`` (per axis)."""

    stride: float
    offset: float

    @classmethod
    def half_pixel(cls, n_in: int, n_out: int) -> "GridGeometry":
        s = n_out / n_in
        return cls(stride=s, offset=(s - 1) / 2)


def normalize_minmax(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def upsample(grid: np.ndarray, out: tuple[int, int], geometry: Optional[GridGeometry] = None) -> np.ndarray:
    """Bilinear upsampling with edge clamping.

    Without ``geometry`` cell centres follow the half-pixel convention (the
    same as ``align_corners=False`` resizing). A feature extractor whose cells
    are centred elsewhere passes its own geometry.
    """
    grid = np.asarray(grid, dtype=np.float64)
    coords = []
    for n_in, n_out in zip(grid.shape, out):
        g = geometry or GridGeometry.half_pixel(n_in, n_out)
        coords.append((np.arange(n_out) - g.offset) / g.stride)
    yy, xx = np.meshgrid(*coords, indexing="ij")
    up = map_coordinates(grid, [yy, xx], order=1, mode="nearest")
    return np.clip(up, 0.0, 1.0)


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def reduce_channels(feature_map, reduction: Reduction | str = Reduction.MEAN_ABS) -> np.ndarray:
    fmap = _to_numpy(feature_map)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (F, H, W), got {fmap.shape}")
    if Reduction(reduction) is Reduction.MEAN_ABS:
        return np.abs(fmap).mean(axis=0)
    return np.sqrt((fmap ** 2).sum(axis=0))


def feature_saliency(feature_map, reduction: Reduction | str = Reduction.MEAN_ABS, out: tuple[int, int] = (224, 224),
                     source: SaliencySource | str = SaliencySource.GLOBAL, image_id: str = "",
                     geometry: Optional[GridGeometry] = None) -> SaliencyMap:
    grid = normalize_minmax(reduce_channels(feature_map, reduction))
    return SaliencyMap(upsample(grid, out, geometry), source, image_id)


def attention_saliency(coeffs, out: tuple[int, int] = (224, 224), image_id: str = "",
                       geometry: Optional[GridGeometry] = None) -> SaliencyMap:
    alpha = _to_numpy(coeffs)
    if alpha.ndim == 3:
        if alpha.shape[0] != 1:
            raise ValueError(f"attention coefficients must have one channel, got {alpha.shape}")
        alpha = alpha[0]
    grid = normalize_minmax(alpha)
    return SaliencyMap(upsample(grid, out, geometry), SaliencySource.FUSION_GATE, image_id)


def overlay(image, saliency, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Blend a colour-mapped saliency map over ``image``; returns (H, W, 3) uint8."""
    import matplotlib

    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    img = _to_numpy(image)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    rgb = np.moveaxis(img[:3], 0, -1)
    sal = np.asarray(getattr(saliency, "data", saliency), dtype=np.float64)
    if sal.shape != rgb.shape[:2]:
        raise ValueError(f"saliency {sal.shape} does not match image {rgb.shape[:2]}")
    colours = matplotlib.colormaps[colormap](sal)[..., :3]
    blended = (1.0 - alpha) * rgb + alpha * colours
    return np.round(np.clip(blended, 0, 1) * 255).astype(np.uint8)


def save_overlay(path: str | Path, image, saliency, alpha: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, saliency, alpha)).save(path)
    return path


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def export_saliency(saliency: SaliencyMap, path: str | Path, model_hash: str = "") -> Path:
    """Write a 16-bit grayscale PNG plus a ``.json`` sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.round(saliency.data * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    meta = {
        "image_id": saliency.image_id,
        "source": saliency.source.value,
        "model_hash": model_hash,
        "height": int(q.shape[0]),
        "width": int(q.shape[1]),
        "scale": 65535,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def import_saliency(path: str | Path) -> SaliencyMap:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"saliency sidecar {side} is missing")
    try:
        meta = json.loads(side.read_text())
        source, image_id = meta["source"], meta["image_id"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt saliency sidecar {side}: {exc}") from exc
    with Image.open(path) as im:
        data = np.array(im).astype(np.float64)
    if data.ndim != 2:
        raise ValueError(f"{path} is not a single-channel image")
    if (meta.get("height"), meta.get("width")) != data.shape:
        raise ValueError(f"{path} has shape {data.shape}, sidecar says "
                         f"({meta.get('height')}, {meta.get('width')})")
    return SaliencyMap(data / meta.get("scale", 65535), source, image_id)


@dataclass
class AttributionPlugin:
    """External attribution method: ``attribute(model, image, target) -> SaliencyMap or array``."""

    name: str
    attribute: Callable

    def __call__(self, model, image, target: int) -> SaliencyMap:
        result = self.attribute(model, image, target)
        if not isinstance(result, SaliencyMap):
            result = SaliencyMap(result, SaliencySource.EXTERNAL)
        img = np.asarray(image)
        if result.shape != img.shape[-2:]:
            raise ValueError(f"plugin {self.name} returned {result.shape}, image is {img.shape[-2:]}")
        return result


_PLUGINS: dict[str, AttributionPlugin] = {}


def register_plugin(plugin: AttributionPlugin) -> None:
    _PLUGINS[plugin.name] = plugin


def get_plugin(name: str) -> AttributionPlugin:
    try:
        return _PLUGINS[name]
    except KeyError:
        raise KeyError(f"no attribution plugin named {name!r}; registered: {sorted(_PLUGINS)}") from None


def model_saliency(outputs: dict, source: SaliencySource | str, index: int, out: tuple[int, int],
                   reduction: Reduction | str = Reduction.MEAN_ABS, geometry: Optional[GridGeometry] = None,
                   image_id: str = "") -> SaliencyMap:
    """Saliency for sample ``index`` of a :class:`~fusionscope.model.DualBranchNet` forward pass."""
    source = SaliencySource(source)
    if source is SaliencySource.FUSION_GATE:
        if "alpha" not in outputs:
            raise ValueError("FUSION_GATE saliency needs a model built with the gate strategy")
        return attention_saliency(outputs["alpha"][index], out, image_id, geometry)
    key = {SaliencySource.GLOBAL: "global_map", SaliencySource.LOCAL: "local_map",
           SaliencySource.FUSION_CONCAT: "fused", SaliencySource.FUSION_PRODUCT: "fused"}.get(source)
    if key is None:
        raise ValueError(f"{source.value} saliency is not produced by the model")
    return feature_saliency(outputs[key][index], reduction, out, source, image_id, geometry)
