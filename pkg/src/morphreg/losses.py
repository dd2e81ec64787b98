"""Loss terms for displacement-field registration.

Implemented terms: mean squared error, windowed local cross-correlation,
diffusion smoothness of the displacement field, soft Dice overlap, and their
weighted combinations (unsupervised and auxiliary-label objectives).  Every
term has a forward value and an explicit vector-Jacobian product.

Scaling convention for the combined objectives: the similarity term is a
per-voxel mean (for CC, the per-voxel term sum divided by the voxel count)
and the smoothness term is the mean over defined difference terms.  This
keeps the trade-off weights resolution-independent, so published weight
values behave the same at any grid size.  The raw (summed) quantities of
:func:`local_cc` and :func:`smoothness` are exposed unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    DisplacementField,
    GridImage,
    SegmentationMap,
    check_same_geometry,
)
from .warp import warp_backward, warp_image, warp_segmentation, warp_segmentation_backward

EPS = 1e-5


class _SegOnly:
    """Sentinel for the labels-only training regime (auxiliary weight -> inf)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "SEG_ONLY"


SEG_ONLY = _SegOnly()


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights: lam for smoothness, gamma for the label term."""

    lam: float = 0.02
    gamma: float | _SegOnly = 0.0
    cc_window: int = 9

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.gamma is not SEG_ONLY and self.gamma < 0:
            raise ValueError("gamma must be nonnegative or SEG_ONLY")
        if self.cc_window < 3 or self.cc_window % 2 == 0:
            raise ValueError("cc_window must be odd and >= 3")


# ---------------------------------------------------------------------------
# mean squared error

def mse(fixed: GridImage, warped: GridImage) -> float:
    check_same_geometry(fixed, warped)
    diff = fixed.values - warped.values
    return float(np.mean(diff * diff))


def mse_backward(fixed: GridImage, warped: GridImage, upstream: float = 1.0) -> np.ndarray:
    """d(mse)/d(warped)."""
    check_same_geometry(fixed, warped)
    n = fixed.geom.voxel_count
    return upstream * 2.0 / n * (warped.values - fixed.values)


# ---------------------------------------------------------------------------
# local cross-correlation

def _window_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sliding-window sum with windows clamped (truncated) at the grid edge."""
    out = arr
    for axis in range(arr.ndim):
        p = np.cumsum(out, axis=axis)
        p = np.concatenate([np.zeros_like(np.take(p, [0], axis=axis)), p], axis=axis)
        dim = arr.shape[axis]
        hi = np.minimum(np.arange(dim) + radius, dim - 1) + 1
        lo = np.maximum(np.arange(dim) - radius, 0)
        out = np.take(p, hi, axis=axis) - np.take(p, lo, axis=axis)
    return out


def _cc_terms(f: np.ndarray, w: np.ndarray, radius: int):
    ones = np.ones_like(f)
    count = _window_sum(ones, radius)
    sf = _window_sum(f, radius)
    sw = _window_sum(w, radius)
    sff = _window_sum(f * f, radius)
    sww = _window_sum(w * w, radius)
    sfw = _window_sum(f * w, radius)
    num = sfw - sf * sw / count
    varf = sff - sf * sf / count
    varw = sww - sw * sw / count
    denom = varf * varw + EPS
    return count, sf, sw, num, varf, varw, denom


def local_cc(fixed: GridImage, warped: GridImage, window: int = 9) -> float:
    """Sum over voxels of the squared windowed normalized correlation.

    Windows near the boundary are truncated to the available neighborhood.
    A variance floor of EPS keeps flat windows finite.
    """
    check_same_geometry(fixed, warped)
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    _, _, _, num, _, _, denom = _cc_terms(fixed.values, warped.values, window // 2)
    return float(np.sum(num * num / denom))


def local_cc_terms(fixed: GridImage, warped: GridImage, window: int = 9) -> np.ndarray:
    """Per-voxel CC terms (each in [0, 1] up to the EPS floor)."""
    check_same_geometry(fixed, warped)
    _, _, _, num, _, _, denom = _cc_terms(fixed.values, warped.values, window // 2)
    return num * num / denom


def local_cc_backward(
    fixed: GridImage, warped: GridImage, window: int = 9, upstream: float = 1.0
) -> np.ndarray:
    """d(local_cc)/d(warped).

    With centered window sums, d num_p / d w_q = f_q - fbar_p and
    d varw_p / d w_q = 2 (w_q - wbar_p) for q in the window of p; window
    membership is symmetric, so the sum over p collapses to window sums of
    the per-voxel coefficients.
    """
    check_same_geometry(fixed, warped)
    radius = window // 2
    f, w = fixed.values, warped.values
    count, sf, sw, num, varf, _, denom = _cc_terms(f, w, radius)
    fbar = sf / count
    wbar = sw / count
    a = 2.0 * num / denom
    b = -2.0 * num * num * varf / (denom * denom)
    grad = (
        f * _window_sum(a, radius)
        - _window_sum(a * fbar, radius)
        + w * _window_sum(b, radius)
        - _window_sum(b * wbar, radius)
    )
    return upstream * grad


# ---------------------------------------------------------------------------
# diffusion smoothness

def smoothness(field: DisplacementField) -> float:
    """Sum over voxels of the squared forward-difference gradient of u.

    Differences whose forward neighbor falls outside the grid are omitted.
    """
    total = 0.0
    vecs = field.vectors
    for axis in range(field.geom.ndim):
        d = np.diff(vecs, axis=axis)
        total += float(np.sum(d * d))
    return total


def smoothness_term_count(field: DisplacementField) -> int:
    """Number of defined squared difference terms (for mean normalization)."""
    dims = field.geom.dims
    n = len(dims)
    voxels = int(np.prod(dims))
    return sum((voxels // dims[d]) * (dims[d] - 1) * n for d in range(n))


def smoothness_backward(field: DisplacementField, upstream: float = 1.0) -> np.ndarray:
    """d(smoothness)/d(u)."""
    grad = np.zeros_like(field.vectors)
    vecs = field.vectors
    for axis in range(field.geom.ndim):
        d = np.diff(vecs, axis=axis)
        pad_lo = [(0, 0)] * vecs.ndim
        pad_lo[axis] = (1, 0)
        pad_hi = [(0, 0)] * vecs.ndim
        pad_hi[axis] = (0, 1)
        grad += 2.0 * (np.pad(d, pad_lo) - np.pad(d, pad_hi))
    return upstream * grad


# ---------------------------------------------------------------------------
# Dice overlap

def soft_dice(sf: SegmentationMap, sw: SegmentationMap) -> np.ndarray:
    """Per-channel soft Dice: 2 * sum(sf*sw) / (sum(sf) + sum(sw) + EPS)."""
    check_same_geometry(sf, sw)
    if sf.channels != sw.channels:
        raise ValueError(f"channel mismatch: {sf.channels} vs {sw.channels}")
    axes = tuple(range(sf.geom.ndim))
    inter = np.sum(sf.weights * sw.weights, axis=axes)
    sizes = np.sum(sf.weights, axis=axes) + np.sum(sw.weights, axis=axes)
    return 2.0 * inter / (sizes + EPS)


def seg_loss(sf: SegmentationMap, sw: SegmentationMap) -> float:
    """Negative mean of per-structure soft Dice."""
    return float(-np.mean(soft_dice(sf, sw)))


def seg_loss_backward(
    sf: SegmentationMap, sw: SegmentationMap, upstream: float = 1.0
) -> np.ndarray:
    """d(seg_loss)/d(sw weights)."""
    check_same_geometry(sf, sw)
    if sf.channels != sw.channels:
        raise ValueError(f"channel mismatch: {sf.channels} vs {sw.channels}")
    k = sf.channels
    axes = tuple(range(sf.geom.ndim))
    inter = np.sum(sf.weights * sw.weights, axis=axes)
    denom = np.sum(sf.weights, axis=axes) + np.sum(sw.weights, axis=axes) + EPS
    # d dice_c / d sw_c(p) = (2 sf_c(p) denom - 2 inter) / denom^2
    ddice = (2.0 * sf.weights * denom - 2.0 * inter) / (denom * denom)
    return upstream * (-1.0 / k) * ddice


# ---------------------------------------------------------------------------
# combined objectives

@dataclass(frozen=True)
class LossBreakdown:
    total: float
    similarity: float
    smooth: float
    seg: float = 0.0


def _similarity(fixed, warped, sim_kind, window):
    if sim_kind == "mse":
        return mse(fixed, warped)
    if sim_kind == "cc":
        return -local_cc(fixed, warped, window) / fixed.geom.voxel_count
    raise ValueError(f"unknown sim_kind {sim_kind!r}")


def _similarity_backward(fixed, warped, sim_kind, window):
    if sim_kind == "mse":
        return mse_backward(fixed, warped)
    return local_cc_backward(fixed, warped, window, upstream=-1.0 / fixed.geom.voxel_count)


def unsup_loss(
    fixed: GridImage,
    moving: GridImage,
    field: DisplacementField,
    weights: LossWeights,
    sim_kind: str = "mse",
) -> LossBreakdown:
    """Similarity of fixed vs warped moving, plus weighted smoothness."""
    check_same_geometry(fixed, moving, field)
    warped = warp_image(moving, field)
    sim = _similarity(fixed, warped, sim_kind, weights.cc_window)
    smooth = smoothness(field) / smoothness_term_count(field)
    return LossBreakdown(sim + weights.lam * smooth, sim, smooth)


def unsup_loss_grad(
    fixed: GridImage,
    moving: GridImage,
    field: DisplacementField,
    weights: LossWeights,
    sim_kind: str = "mse",
) -> tuple[LossBreakdown, np.ndarray]:
    """Forward value and gradient with respect to the displacement field."""
    check_same_geometry(fixed, moving, field)
    warped = warp_image(moving, field)
    sim = _similarity(fixed, warped, sim_kind, weights.cc_window)
    smooth_raw = smoothness(field)
    terms = smoothness_term_count(field)
    upstream_w = _similarity_backward(fixed, warped, sim_kind, weights.cc_window)
    _, grad_u = warp_backward(moving, field, upstream_w)
    grad_u = grad_u + (weights.lam / terms) * smoothness_backward(field)
    value = LossBreakdown(sim + weights.lam * smooth_raw / terms, sim, smooth_raw / terms)
    return value, grad_u


def aux_loss(
    fixed: GridImage,
    moving: GridImage,
    fixed_seg: SegmentationMap,
    moving_seg: SegmentationMap,
    field: DisplacementField,
    weights: LossWeights,
    sim_kind: str = "mse",
) -> LossBreakdown:
    """Unsupervised objective plus gamma-weighted segmentation overlap.

    With gamma = SEG_ONLY the image and smoothness terms are zeroed and only
    the overlap term remains.
    """
    check_same_geometry(fixed, moving, field, fixed_seg, moving_seg)
    warped_seg = warp_segmentation(moving_seg, field)
    seg = seg_loss(fixed_seg, warped_seg)
    if weights.gamma is SEG_ONLY:
        return LossBreakdown(seg, 0.0, 0.0, seg)
    base = unsup_loss(fixed, moving, field, weights, sim_kind)
    return LossBreakdown(
        base.total + weights.gamma * seg, base.similarity, base.smooth, seg
    )


def aux_loss_grad(
    fixed: GridImage,
    moving: GridImage,
    fixed_seg: SegmentationMap,
    moving_seg: SegmentationMap,
    field: DisplacementField,
    weights: LossWeights,
    sim_kind: str = "mse",
) -> tuple[LossBreakdown, np.ndarray]:
    """Forward value and gradient of :func:`aux_loss` wrt the field."""
    check_same_geometry(fixed, moving, field, fixed_seg, moving_seg)
    warped_seg = warp_segmentation(moving_seg, field)
    seg = seg_loss(fixed_seg, warped_seg)
    upstream_seg = seg_loss_backward(fixed_seg, warped_seg)
    _, grad_seg_u = warp_segmentation_backward(moving_seg, field, upstream_seg)
    if weights.gamma is SEG_ONLY:
        return LossBreakdown(seg, 0.0, 0.0, seg), grad_seg_u
    base, grad_u = unsup_loss_grad(fixed, moving, field, weights, sim_kind)
    value = LossBreakdown(
        base.total + weights.gamma * seg, base.similarity, base.smooth, seg
    )
    return value, grad_u + weights.gamma * grad_seg_u
