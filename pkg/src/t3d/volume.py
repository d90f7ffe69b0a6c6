"""Voxel volumes and their preprocessing pipeline.

A `Volume` is a rank-3 float32 grid indexed [x, y, z] with per-axis physical
spacing in millimeters. Sampling is corner-anchored: the physical position
of index i along an axis is i * spacing, and out-of-range samples clamp to
the nearest boundary voxel. All operations are pure; randomness enters only
through an explicitly passed numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    CropTooLargeError,
    InvalidDimsError,
    InvalidSpacingError,
    InvalidWindowError,
    PreconditionError,
)


@dataclass
class Volume:
    """Rank-3 voxel grid with physical spacing metadata.

    Attributes:
        voxels: float32 array of shape (W, H, S), indexed [x, y, z].
        spacing: mm per voxel along (x, y, z); all components > 0.
        unit_range: True once intensities have been normalized into [0, 1].
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    unit_range: bool = False

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise InvalidDimsError(f"voxels must be rank-3, got rank {self.voxels.ndim}")
        if any(d < 1 for d in self.voxels.shape):
            raise InvalidDimsError(f"every axis must have >= 1 voxel, got {self.voxels.shape}")
        if len(self.spacing) != 3:
            raise InvalidSpacingError(f"spacing must have 3 components, got {self.spacing}")
        # carried at f32 precision: the on-disk format stores spacing as f32,
        # and round trips are required to be bit-exact
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise InvalidSpacingError(f"spacing components must be > 0, got {self.spacing}")
        if self.unit_range:
            lo, hi = float(self.voxels.min()), float(self.voxels.max())
            if lo < 0.0 or hi > 1.0:
                raise PreconditionError(
                    f"unit_range volume has values outside [0, 1]: [{lo}, {hi}]"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def copy(self) -> "Volume":
        return Volume(self.voxels.copy(), self.spacing, self.unit_range)


def hu_window(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp intensities to [lo, hi] and map that window affinely onto [0, 1].

    lo maps to 0, hi maps to 1; spacing is unchanged and the result is
    flagged unit_range. Windowing an already unit-range volume with
    lo=0, hi=1 is the identity.
    """
    if not lo < hi:
        raise InvalidWindowError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    scaled = (np.clip(v.voxels, lo, hi) - np.float32(lo)) / np.float32(hi - lo)
    return Volume(scaled.astype(np.float32), v.spacing, unit_range=True)


def _sample_axis(u: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped linear-interpolation helpers for fractional coordinates u on [0, n-1]."""
    u = np.clip(u, 0.0, float(n - 1))
    i0 = np.floor(u).astype(np.int64)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (u - i0).astype(np.float32)
    return i0, i1, w


def _trilinear(voxels: np.ndarray, ux: np.ndarray, uy: np.ndarray, uz: np.ndarray) -> np.ndarray:
    """Evaluate a separable trilinear interpolant at the coordinate grid (ux, uy, uz).

    Each u* is a 1-D array of fractional source indices for its axis; the
    result has shape (len(ux), len(uy), len(uz)). Weights of exactly 0/1 hit
    source voxels bit-exactly.
    """
    nx, ny, nz = voxels.shape
    x0, x1, wx = _sample_axis(ux, nx)
    y0, y1, wy = _sample_axis(uy, ny)
    z0, z1, wz = _sample_axis(uz, nz)

    wx = wx[:, None, None]
    wy = wy[None, :, None]
    wz = wz[None, None, :]

    def grid(ix, iy, iz):
        return voxels[np.ix_(ix, iy, iz)]

    c00 = grid(x0, y0, z0) * (1 - wx) + grid(x1, y0, z0) * wx
    c10 = grid(x0, y1, z0) * (1 - wx) + grid(x1, y1, z0) * wx
    c01 = grid(x0, y0, z1) * (1 - wx) + grid(x1, y0, z1) * wx
    c11 = grid(x0, y1, z1) * (1 - wx) + grid(x1, y1, z1) * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    return (c0 * (1 - wz) + c1 * wz).astype(np.float32)


def resample(v: Volume, target_spacing) -> Volume:
    """Resample to a new physical spacing with trilinear interpolation.

    Output dims are round(dims * spacing / target_spacing), at least 1 per
    axis. Equal spacings give a voxel-identical copy.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise InvalidSpacingError(f"target spacing must be 3 positive reals, got {target}")
    # round half up so dims never depend on banker's-rounding parity
    out_dims = tuple(
        max(1, int(np.floor(d * s / t + 0.5))) for d, s, t in zip(v.dims, v.spacing, target)
    )
    coords = [
        np.arange(od, dtype=np.float64) * t / s
        for od, t, s in zip(out_dims, target, v.spacing)
    ]
    out = _trilinear(v.voxels, *coords)
    return Volume(out, target, v.unit_range)


def resize(v: Volume, target_dims) -> Volume:
    """Resample to exact target dims, rescaling spacing to keep physical extent.

    The physical extent of an axis is dims * spacing, so the output spacing
    is spacing * dims / target_dims.
    """
    dims = tuple(int(d) for d in target_dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvalidDimsError(f"target dims must be 3 positive integers, got {target_dims}")
    coords = [
        np.arange(td, dtype=np.float64) * (d / td) for td, d in zip(dims, v.dims)
    ]
    out = _trilinear(v.voxels, *coords)
    new_spacing = tuple(s * d / td for s, d, td in zip(v.spacing, v.dims, dims))
    return Volume(out, new_spacing, v.unit_range)


def crop_origin(dims, crop_dims, rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw a uniformly random valid crop origin, advancing the generator."""
    if any(c > d for c, d in zip(crop_dims, dims)):
        raise CropTooLargeError(f"crop {tuple(crop_dims)} exceeds volume {tuple(dims)}")
    if any(c < 1 for c in crop_dims):
        raise InvalidDimsError(f"crop dims must be >= 1, got {tuple(crop_dims)}")
    return tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop_dims))


def random_crop(v: Volume, crop_dims, rng: np.random.Generator) -> Volume:
    """Cut a contiguous sub-block at a uniformly random valid origin.

    Spacing is inherited. The generator advances deterministically once per
    call, so a fixed seed reproduces the same origin sequence.
    """
    origin = crop_origin(v.dims, crop_dims, rng)
    sl = tuple(slice(o, o + c) for o, c in zip(origin, crop_dims))
    return Volume(v.voxels[sl].copy(), v.spacing, v.unit_range)


def make_views(v: Volume, m: int, crop_dims, rng: np.random.Generator) -> list[Volume]:
    """Generate m independent random-crop views of the same volume."""
    if m < 1:
        raise InvalidDimsError(f"number of views must be >= 1, got {m}")
    return [random_crop(v, crop_dims, rng) for _ in range(m)]
