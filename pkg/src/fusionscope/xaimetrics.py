"""Functionally grounded scoring of saliency maps.

Coherence with a reference mask (relevance mass accuracy, relevance rank
accuracy) and incremental deletion: pixels are occluded by Gaussian blur in
most-relevant-first (MoRF) or least-relevant-first (LeRF) order while the
predicted class probability is recorded, and the two curves are summarised by
the degradation score and its class-adjusted variant.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class Direction(str, enum.Enum):
    MORF = "MORF"
    LERF = "LERF"


class TiePolicy(str, enum.Enum):
    EXPECTED = "EXPECTED"
    STABLE = "STABLE"


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _check_pair(saliency, mask):
    sal = _as_array(saliency)
    m = np.asarray(getattr(mask, "data", mask))
    if sal.shape != m.shape:
        raise ValueError(f"saliency {sal.shape} and mask {m.shape} differ in shape")
    if not np.all(np.isfinite(sal)):
        raise ValueError("saliency contains non-finite values")
    m = m.astype(bool)
    if not m.any():
        raise ValueError("mask is empty")
    return sal, m


# --------------------------------------------------------------------------
# coherence
# --------------------------------------------------------------------------


def rma(saliency, mask) -> float:
    """Fraction of total relevance inside ``mask``.

    An all-zero saliency map has no mass to distribute; it scores 0.0 (see
    :func:`is_degenerate`).
    """
    sal, m = _check_pair(saliency, mask)
    if (sal < 0).any():
        raise ValueError("relevance mass needs non-negative saliency")
    total = sal.sum()
    if total == 0:
        return 0.0
    return float(sal[m].sum() / total)


def is_degenerate(saliency) -> bool:
    return not np.any(_as_array(saliency))


def rra(saliency, mask, tie_policy: TiePolicy | str = TiePolicy.EXPECTED) -> float:
    """Share of the ``K = |mask|`` most relevant pixels that fall inside ``mask``.

    ``EXPECTED`` averages over every ordering of pixels tied at the top-K
    boundary (closed form, no sampling); ``STABLE`` breaks ties by row-major
    index.
    """
    sal, m = _check_pair(saliency, mask)
    tie_policy = TiePolicy(tie_policy)
    flat, inside = sal.ravel(), m.ravel()
    k = int(inside.sum())
    if tie_policy is TiePolicy.STABLE:
        top = np.argsort(-flat, kind="stable")[:k]
        return float(inside[top].sum() / k)
    threshold = np.sort(flat)[::-1][k - 1]
    above = flat > threshold
    tied = flat == threshold
    n_above = int(above.sum())
    hits = inside[above].sum() + (k - n_above) * inside[tied].sum() / tied.sum()
    return float(hits / k)


@dataclass
class CoherenceScore:
    rma: float
    rra: float
    degenerate: bool


def coherence(saliency, mask, tie_policy: TiePolicy | str = TiePolicy.EXPECTED) -> CoherenceScore:
    return CoherenceScore(rma(saliency, mask), rra(saliency, mask, tie_policy), is_degenerate(saliency))


def annotation_coherence(annotation, reference, saliency,
                         tie_policy: TiePolicy | str = TiePolicy.EXPECTED) -> dict:
    """Score a human annotation against the reference mask and a saliency map against the annotation.

    Returns ``annotation_rma``/``annotation_rra`` (binary annotation used as the
    relevance map, reference as the mask) and ``saliency_rma``/``saliency_rra``
    (saliency scored against the annotation as the mask).
    """
    ann = np.asarray(getattr(annotation, "data", annotation)).astype(bool)
    ref = np.asarray(getattr(reference, "data", reference)).astype(bool)
    if not ann.any():
        raise ValueError("annotation is empty")
    if not ref.any():
        raise ValueError("reference mask is empty")
    if ann.shape != ref.shape or ann.shape != _as_array(saliency).shape:
        raise ValueError("annotation, reference and saliency must share dimensions")
    relevance = ann.astype(np.float64)
    return {
        "annotation_rma": rma(relevance, ref),
        "annotation_rra": rra(relevance, ref, tie_policy),
        "saliency_rma": rma(saliency, ann),
        "saliency_rra": rra(saliency, ann, tie_policy),
        "degenerate": is_degenerate(saliency),
    }


# --------------------------------------------------------------------------
# rankings and occlusion
# --------------------------------------------------------------------------


@dataclass
class PixelRanking:
    order: np.ndarray
    direction: Direction
    tie_policy: TiePolicy
    seed: Optional[int] = None
    shape: tuple = ()


def rank_pixels(saliency, direction: Direction | str = Direction.MORF,
                tie_policy: TiePolicy | str = TiePolicy.STABLE, seed: Optional[int] = None) -> PixelRanking:
    """Order flat pixel indices by relevance (descending for MoRF, ascending for LeRF).

    Ties go to row-major order under ``STABLE``; under ``EXPECTED`` one random
    ordering within ties is drawn from ``seed`` (a fresh seed is drawn and
    recorded when none is given).
    """
    sal = _as_array(saliency)
    if not np.all(np.isfinite(sal)):
        raise ValueError("saliency contains non-finite values")
    direction, tie_policy = Direction(direction), TiePolicy(tie_policy)
    flat = sal.ravel()
    key = -flat if direction is Direction.MORF else flat
    if tie_policy is TiePolicy.STABLE:
        order = np.argsort(key, kind="stable")
        seed = None
    else:
        if seed is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        jitter = np.random.default_rng(seed).permutation(flat.size)
        order = np.lexsort((jitter, key))
    return PixelRanking(order=order, direction=direction, tie_policy=tie_policy, seed=seed, shape=sal.shape)


def gaussian_kernel1d(kernel: int, sigma: float) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {kernel}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.arange(kernel, dtype=np.float64) - kernel // 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_blur(image, kernel: int = 21, sigma: float = 5.0) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with mirror ("reflect") padding."""
    img = np.asarray(image, dtype=np.float64)
    w = gaussian_kernel1d(kernel, sigma)
    r = kernel // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(img, pad, mode="reflect")
    h, wd = img.shape[-2:]
    # rows then columns
    tmp = sum(w[i] * padded[..., i:i + h, :] for i in range(kernel))
    return sum(w[i] * tmp[..., :, i:i + wd] for i in range(kernel))


def blur_region(image, pixels, kernel: int = 21, sigma: float = 5.0,
                blurred: Optional[np.ndarray] = None) -> np.ndarray:
    """Copy of ``image`` whose ``pixels`` (flat row-major indices) take the fully blurred values.

    ``blurred`` may be passed to reuse a precomputed :func:`gaussian_blur` of the image.
    """
    img = np.asarray(image, dtype=np.float64)
    if blurred is None:
        blurred = gaussian_blur(img, kernel, sigma)
    h, w = img.shape[-2:]
    out = img.reshape(img.shape[:-2] + (h * w,)).copy()
    idx = np.asarray(pixels, dtype=np.int64).ravel()
    if idx.size:
        out[..., idx] = blurred.reshape(out.shape)[..., idx]
    return out.reshape(img.shape)


# --------------------------------------------------------------------------
# perturbation curves and degradation scores
# --------------------------------------------------------------------------


@dataclass
class PerturbationCurve:
    values: np.ndarray
    class_id: int
    direction: Direction
    step_fraction: float
    pixels_per_step: list = field(default_factory=list)
    seed: Optional[int] = None

    def __len__(self):
        return len(self.values)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "direction": self.direction.value,
            "step_fraction": float(self.step_fraction),
            "step_fractions": [float((i + 1) * self.step_fraction) for i in range(len(self.values))],
            "pixels_per_step": [int(n) for n in self.pixels_per_step],
            "ranking_seed": self.seed,
            "q": [float(v) for v in self.values],
        }


def occlusion_counts(n_pixels: int, steps: int) -> list[int]:
    """Cumulative number of occluded pixels after each step: ``ceil(i * N / steps)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [-(-i * n_pixels // steps) for i in range(1, steps + 1)]


ModelFn = Callable[[np.ndarray], np.ndarray]


def _class_probabilities(model: ModelFn, batch: np.ndarray, class_id: int) -> np.ndarray:
    probs = np.asarray(model(batch), dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.shape[0] != batch.shape[0]:
        raise ValueError(f"model returned {probs.shape[0]} rows for a batch of {batch.shape[0]}")
    if (not np.all(np.isfinite(probs)) or probs.min() < -1e-6 or probs.max() > 1 + 1e-6
            or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4)):
        raise ValueError("model output is not a probability vector")
    return np.clip(probs[:, class_id], 0.0, 1.0)


def perturbation_curve(model: ModelFn, image, ranking: PixelRanking, steps: int = 10, class_id: int = 1,
                       kernel: int = 21, sigma: float = 5.0, batch_size: int = 32) -> PerturbationCurve:
    """Class probability after cumulatively blurring the first ``ceil(i*N/steps)`` ranked pixels.

    ``model`` maps a (B, C, H, W) float batch to (B, n_classes) probabilities.
    The blurred copy is computed once and pasted region by region.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    n = img.shape[-2] * img.shape[-1]
    if ranking.order.size != n:
        raise ValueError(f"ranking covers {ranking.order.size} pixels, image has {n}")
    counts = occlusion_counts(n, steps)
    blurred = gaussian_blur(img, kernel, sigma)
    values = []
    for start in range(0, steps, batch_size):
        chunk = counts[start:start + batch_size]
        batch = np.stack([blur_region(img, ranking.order[:c], blurred=blurred) for c in chunk])
        values.append(_class_probabilities(model, batch, class_id))
    return PerturbationCurve(values=np.concatenate(values), class_id=class_id, direction=ranking.direction,
                             step_fraction=1.0 / steps, pixels_per_step=counts, seed=ranking.seed)


def degradation_score(morf, lerf) -> float:
    """Mean per-step gap ``lerf - morf``; positive when MoRF occlusion hurts more."""
    if isinstance(morf, PerturbationCurve) and isinstance(lerf, PerturbationCurve):
        if morf.class_id != lerf.class_id:
            raise ValueError("curves were recorded for different classes")
    a = np.asarray(getattr(morf, "values", morf), dtype=np.float64)
    b = np.asarray(getattr(lerf, "values", lerf), dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError(f"curve lengths differ or are empty: {a.shape} vs {b.shape}")
    return float(np.mean(b - a))


@dataclass
class DegradationResult:
    ds: float
    ds_per_class: dict
    ds_c: float
    alpha: float
    delta: float

    def to_dict(self) -> dict:
        return asdict(self)


def class_adjusted_ds(ds_per_class: Mapping, alpha: float = 1.0) -> DegradationResult:
    """Mean of the two class scores penalised by ``alpha`` times half their gap.

    Values of ``ds_per_class`` may be scalars or sequences of per-image scores
    (averaged first).
    """
    if len(ds_per_class) != 2:
        raise ValueError(f"class-adjusted score needs exactly 2 classes, got {len(ds_per_class)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    per_class = {}
    for c, v in sorted(ds_per_class.items()):
        v = np.asarray(v, dtype=np.float64)
        if v.size == 0:
            raise ValueError(f"class {c} has no scores")
        per_class[c] = float(v.mean())
    s0, s1 = per_class.values()
    ds_mean = 0.5 * (s0 + s1)
    delta = 0.5 * abs(s1 - s0)
    return DegradationResult(ds=ds_mean, ds_per_class=per_class, ds_c=ds_mean - alpha * delta,
                             alpha=float(alpha), delta=delta)


@dataclass
class ImageDegradation:
    ds: float
    morf: PerturbationCurve
    lerf: PerturbationCurve


def image_degradation(model: ModelFn, image, saliency, class_id: int, steps: int = 10,
                      tie_policy: TiePolicy | str = TiePolicy.EXPECTED, seed: Optional[int] = 0,
                      kernel: int = 21, sigma: float = 5.0) -> ImageDegradation:
    """MoRF and LeRF curves for one image and the resulting degradation score."""
    morf_rank = rank_pixels(saliency, Direction.MORF, tie_policy, seed)
    lerf_rank = rank_pixels(saliency, Direction.LERF, tie_policy, morf_rank.seed)
    morf = perturbation_curve(model, image, morf_rank, steps, class_id, kernel, sigma)
    lerf = perturbation_curve(model, image, lerf_rank, steps, class_id, kernel, sigma)
    return ImageDegradation(ds=degradation_score(morf, lerf), morf=morf, lerf=lerf)
