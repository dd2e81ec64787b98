"""Synthetic registration problems with known ground-truth deformations.

A base image of smooth labeled blobs serves as the moving image; the fixed
image is the base resampled through a random smooth, folding-free
displacement field, plus small intensity noise.  Warping the moving image
by the generating field therefore reproduces the fixed image exactly, so
the field is the registration ground truth, which real data cannot
provide.  Segmentations are the blob masks of both images.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .grid import (
    DisplacementField,
    GridGeometry,
    GridImage,
    RegistrationPair,
    argmax_labels,
    onehot_from_labels,
)
from .metrics import jacobian_report
from .warp import warp_image, warp_segmentation


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, ...] = (64, 64)
    num_structures: int = 3
    amplitude: float = 6.0          # max displacement magnitude, voxels
    control_spacing: float = 16.0   # spacing of the random control grid
    noise: float = 0.01
    seed: int = 0
    contrasts: tuple[float, ...] | None = None  # per-structure intensity offsets
    texture: float = 0.15           # background texture amplitude
    min_structure_fraction: float = 0.01

    def __post_init__(self):
        if not 2 <= self.num_structures <= 4:
            raise ValueError("num_structures must be in [2, 4]")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.control_spacing < 2:
            raise ValueError("control_spacing must be >= 2")


_DEFAULT_CONTRASTS = (0.85, 0.55, 0.7, 0.4)


def _base_image(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smooth blob image and its hard label map (0 = background)."""
    geom = GridGeometry(spec.dims)
    dims = np.array(spec.dims)
    coords = np.indices(spec.dims, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.int64)
    contrasts = spec.contrasts or _DEFAULT_CONTRASTS
    intensity = np.zeros(spec.dims)
    # background texture so flat regions still carry intensity gradients
    texture = ndimage.gaussian_filter(rng.standard_normal(spec.dims), sigma=min(dims) / 8.0)
    span = texture.max() - texture.min()
    intensity += spec.texture * (texture - texture.min()) / max(span, 1e-12)

    for k in range(spec.num_structures):
        center = dims * rng.uniform(0.25, 0.75, size=len(dims))
        radii = dims * rng.uniform(0.10, 0.18, size=len(dims))
        dist = np.zeros(spec.dims)
        for d in range(len(dims)):
            dist += ((coords[d] - center[d]) / radii[d]) ** 2
        mask = dist <= 1.0
        labels[mask] = k + 1
        # NaN contrast: the structure exists only in the label map, leaving
        # no intensity footprint (alignable through labels, not intensities)
        if not np.isnan(contrasts[k]):
            intensity[mask] = contrasts[k]
    smooth = ndimage.gaussian_filter(intensity, sigma=1.2)
    return smooth, labels


def _random_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random vectors with max magnitude equal to the amplitude."""
    n = len(spec.dims)
    control = tuple(max(int(np.ceil(d / spec.control_spacing)) + 1, 2) for d in spec.dims)
    comps = []
    for _ in range(n):
        coarse = rng.standard_normal(control)
        zoom = [d / c for d, c in zip(spec.dims, control)]
        fine = ndimage.zoom(coarse, zoom, order=3)
        comps.append(ndimage.gaussian_filter(fine, sigma=2.0))
    vecs = np.stack(comps, axis=-1)
    mag = np.linalg.norm(vecs, axis=-1).max()
    if mag > 0:
        vecs *= spec.amplitude / mag
    return vecs


def generate_pair(spec: SynthSpec) -> RegistrationPair:
    """Produce one registration problem; regenerates until the generated
    field is folding-free and every structure keeps its minimum size."""
    geom = GridGeometry(spec.dims)
    rng = np.random.default_rng(spec.seed)
    min_voxels = spec.min_structure_fraction * geom.voxel_count
    for attempt in range(25):
        base_vals, base_labels = _base_image(spec, rng)
        vecs = _random_field(spec, rng)
        u_true = DisplacementField(geom, vecs)
        if spec.amplitude > 0 and jacobian_report(u_true).folding_count > 0:
            continue
        moving = GridImage(geom, base_vals)
        warped = warp_image(moving, u_true)
        fixed_onehot = warp_segmentation(
            onehot_from_labels(GridImage(geom, base_labels.astype(np.float64)),
                               spec.num_structures + 1),
            u_true,
        )
        fixed_labels = argmax_labels(fixed_onehot)
        sizes_ok = all(
            np.sum(base_labels == k) >= min_voxels
            and np.sum(fixed_labels.values == k) >= min_voxels
            for k in range(1, spec.num_structures + 1)
        )
        if not sizes_ok:
            continue
        noise = spec.noise * rng.standard_normal(spec.dims)
        fixed = GridImage(geom, warped.values + noise)
        return RegistrationPair(
            fixed=fixed,
            moving=moving,
            fixed_seg=fixed_labels,
            moving_seg=GridImage(geom, base_labels.astype(np.float64)),
            true_field=u_true,
        )
    raise RuntimeError(f"could not generate a valid pair for {spec} in 25 attempts")


def generate_dataset(spec: SynthSpec, count: int) -> list[RegistrationPair]:
    """Deterministic sequence of pairs with per-pair derived seeds."""
    return [
        generate_pair(replace(spec, seed=spec.seed * 100003 + i)) for i in range(count)
    ]
