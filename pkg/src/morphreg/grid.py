"""Spatial grid data types shared by every module.

Layout contract: all voxel data is stored in C (row-major) order, i.e. the
*last* spatial axis varies fastest.  Flat indices and coordinates are related
through :func:`flat_index` / :func:`coords_of` and every module in the package
uses this one convention.  Displacements are expressed in voxel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised when grid geometries of two operands do not match."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridGeometry:
    """Extents of a regular 2D or 3D voxel grid."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"only 2D/3D grids are supported, got {len(dims)} axes")
        if any(d < 2 for d in dims):
            raise ValueError(f"every extent must be >= 2, got {dims}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))


def flat_index(geom: GridGeometry, coords) -> int:
    """C-order flat index of a coordinate tuple."""
    return int(np.ravel_multi_index(tuple(int(c) for c in coords), geom.dims))


def coords_of(geom: GridGeometry, index: int) -> tuple[int, ...]:
    """Inverse of :func:`flat_index`."""
    return tuple(int(c) for c in np.unravel_index(int(index), geom.dims))


@dataclass(frozen=True)
class GridImage:
    """Scalar intensity field on a regular grid.  Values are finite floats."""

    geom: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.geom.dims:
            raise ValueError(
                f"values shape {vals.shape} does not match geometry {self.geom.dims}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors u, in voxel units.

    The registration map is phi = Id + u; phi is always formed on demand.
    Component d of ``vectors[..., d]`` displaces along spatial axis d.
    """

    geom: GridGeometry
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vecs = _frozen(self.vectors)
        expected = self.geom.dims + (self.geom.ndim,)
        if vecs.shape != expected:
            raise ValueError(f"vectors shape {vecs.shape}, expected {expected}")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("displacement components must be finite")
        object.__setattr__(self, "vectors", vecs)


@dataclass(frozen=True)
class SegmentationMap:
    """K-channel spatial label weights in [0, 1].

    Hard constructors produce exact one-hot rows; linearly warped maps may
    have per-voxel sums slightly below (or marginally above) 1.
    """

    geom: GridGeometry
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != self.geom.ndim + 1 or w.shape[: self.geom.ndim] != self.geom.dims:
            raise ValueError(
                f"weights shape {w.shape} does not match geometry {self.geom.dims}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("segmentation weights must be finite")
        if w.min() < -1e-9 or w.max() > 1.0 + 1e-6:
            raise ValueError("segmentation weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def channels(self) -> int:
        return self.weights.shape[-1]


@dataclass(frozen=True)
class RegistrationPair:
    """One registration problem: fixed/moving images with optional labels."""

    fixed: GridImage
    moving: GridImage
    fixed_seg: GridImage | None = None     # hard integer label codes
    moving_seg: GridImage | None = None
    true_field: DisplacementField | None = None

    @property
    def geom(self) -> GridGeometry:
        return self.fixed.geom


def check_same_geometry(*operands) -> GridGeometry:
    geoms = [op.geom for op in operands]
    first = geoms[0]
    for g in geoms[1:]:
        if g.dims != first.dims:
            raise GeometryError(f"geometry mismatch: {first.dims} vs {g.dims}")
    return first


def identity_displacement(geom: GridGeometry) -> DisplacementField:
    """The zero field: phi = Id."""
    return DisplacementField(geom, np.zeros(geom.dims + (geom.ndim,)))


def onehot_from_labels(labels: GridImage, num_labels: int) -> SegmentationMap:
    """Expand integer label codes into exact one-hot channels.

    Every code must lie in [0, num_labels); a violation is reported with the
    flat index of the offending voxel.
    """
    if num_labels < 1:
        raise ValueError("num_labels must be >= 1")
    codes = labels.values
    rounded = np.rint(codes)
    if not np.array_equal(codes, rounded):
        bad = int(np.flatnonzero(codes != rounded)[0])
        raise ValueError(f"non-integer label code at voxel {bad}")
    codes = rounded.astype(np.int64)
    out_of_range = (codes < 0) | (codes >= num_labels)
    if out_of_range.any():
        bad = int(np.flatnonzero(out_of_range.ravel())[0])
        raise ValueError(
            f"label code {int(codes.ravel()[bad])} out of range [0, {num_labels}) "
            f"at voxel {bad}"
        )
    weights = np.zeros(labels.geom.dims + (num_labels,))
    np.put_along_axis(weights, codes[..., None], 1.0, axis=-1)
    return SegmentationMap(labels.geom, weights)


def argmax_labels(seg: SegmentationMap) -> GridImage:
    """Harden channel weights to label codes; ties go to the lowest channel."""
    return GridImage(seg.geom, np.argmax(seg.weights, axis=-1).astype(np.float64))
