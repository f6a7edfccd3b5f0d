"""Body localisation, cropping, resampling and intensity normalisation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import BadMode, DegenerateBox, EmptyMask, InvalidVolume
from .volume import BoundingBox, Kind, Volume3


@dataclass(frozen=True)
class BodyMaskParams:
    hu_threshold: float = -500.0
    closing_radius_mm: float = 3.0
    connectivity: int = 26

    def __post_init__(self):
        if self.closing_radius_mm < 0:
            raise ValueError("closing_radius_mm must be >= 0")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


@dataclass(frozen=True)
class CropSpec:
    bbox: BoundingBox
    margin_mm: float = 10.0
    pad_value_ct: float = -1024.0
    pad_value_pet: float = 0.0

    def __post_init__(self):
        if self.margin_mm < 0:
            raise ValueError("margin_mm must be >= 0")


@dataclass(frozen=True)
class NormalizationStats:
    clip_lo: float = -1024.0
    clip_hi: float = 1024.0
    mean: float = 0.0
    std: float = 1024.0

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be < clip_hi")
        if not self.std > 0:
            raise ValueError("std must be > 0")


class Interp(str, Enum):
    TRILINEAR = "TRILINEAR"
    NEAREST = "NEAREST"


def round_half_up(x):
    return math.floor(x + 0.5)


def _require_kind(vol, kind):
    if vol.kind is not kind:
        raise InvalidVolume(f"expected a {kind.value} volume, got {vol.kind.value}")


def ball(radii):
    """Ellipsoidal structuring element with per-axis integer radii (voxels)."""
    axes = [np.arange(-r, r + 1) for r in radii]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    dist = np.zeros(gx.shape)
    for g, r in zip((gx, gy, gz), radii):
        if r > 0:
            dist += (g / r) ** 2
    return dist <= 1.0


def largest_component(mask, connectivity=26):
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    # argmax picks the lowest label on ties, which is scan-order deterministic
    return labels == int(np.argmax(counts))


def binary_close(mask, radii):
    """Closing that treats the region outside the grid as unbounded background."""
    if not any(radii):
        return mask.copy()
    se = ball(radii)
    pad = [(r, r) for r in radii]
    padded = np.pad(mask, pad, mode="constant", constant_values=False)
    closed = ndimage.binary_dilation(padded, structure=se)
    closed = ndimage.binary_erosion(closed, structure=se, border_value=1)
    crop = tuple(slice(r, r + n) for r, n in zip(radii, mask.shape))
    return closed[crop] | mask


def extract_body_mask(ct: Volume3, params: BodyMaskParams = BodyMaskParams()) -> Volume3:
    """Threshold, keep the largest connected component, then close."""
    _require_kind(ct, Kind.CT)
    fg = ct.data > params.hu_threshold
    if not fg.any():
        raise EmptyMask(f"no voxel above {params.hu_threshold} HU")
    body = largest_component(fg, params.connectivity)
    radii = [max(0, round_half_up(params.closing_radius_mm / s)) for s in ct.spacing]
    body = binary_close(body, radii)
    return ct.with_data(body, kind=Kind.LABEL)


def compute_bbox(mask: Volume3, margin_mm: float = 0.0) -> BoundingBox:
    """Tight foreground box dilated by ``margin_mm`` and clamped to the grid."""
    if margin_mm < 0:
        raise ValueError("margin_mm must be >= 0")
    nz = np.nonzero(mask.data)
    if nz[0].size == 0:
        raise EmptyMask("mask has no foreground voxels")
    pad = [math.ceil(margin_mm / s) for s in mask.spacing]
    lo = tuple(max(0, int(a.min()) - p) for a, p in zip(nz, pad))
    hi = tuple(min(n, int(a.max()) + 1 + p) for a, n, p in zip(nz, mask.dims, pad))
    return BoundingBox(lo, hi)


def margin_voxels(spacing, margin_mm):
    return tuple(math.ceil(margin_mm / s) for s in spacing)


def pad_value_for(kind: Kind, spec: CropSpec) -> float:
    if kind is Kind.CT:
        return spec.pad_value_ct
    if kind is Kind.PET:
        return spec.pad_value_pet
    return 0.0


def crop_with_padding(vol: Volume3, spec: CropSpec) -> Volume3:
    """Cut ``spec.bbox`` grown by ``spec.margin_mm`` out of ``vol``.

    The box may run past the grid; those voxels take the modality pad value.
    World coordinates of every copied voxel are preserved.
    """
    box = spec.bbox.dilate(margin_voxels(vol.spacing, spec.margin_mm))
    shape = box.shape
    if any(n <= 0 for n in shape):
        raise DegenerateBox(f"box {box} has non-positive extent {shape}")

    out = np.full(shape, pad_value_for(vol.kind, spec), dtype=np.float32)
    src, dst = [], []
    for l, h, n in zip(box.lo, box.hi, vol.dims):
        a, b = max(l, 0), min(h, n)
        if a >= b:
            src = None
            break
        src.append(slice(a, b))
        dst.append(slice(a - l, b - l))
    if src is not None:
        out[tuple(dst)] = vol.data[tuple(src)]
    origin = tuple(vol.index_to_world(box.lo))
    return vol.replace(data=out, origin=origin)


def _axis_coords(n_out, n_in, scale):
    """Input continuous coordinate of each output voxel centre, centre-aligned."""
    j = np.arange(n_out, dtype=np.float64)
    return (j - (n_out - 1) / 2.0) * scale + (n_in - 1) / 2.0


def _interp_axis(data, coords, axis, mode):
    n = data.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    if mode is Interp.NEAREST:
        idx = np.floor(c + 0.5).astype(np.intp)
        return np.take(data, np.minimum(idx, n - 1), axis=axis)
    i0 = np.floor(c).astype(np.intp)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = c - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(data, i0, axis=axis) * (1.0 - w) + np.take(data, i1, axis=axis) * w


def resample(vol: Volume3, target_spacing, mode=Interp.TRILINEAR) -> Volume3:
    """Resample onto ``target_spacing`` keeping the world extent centre fixed.

    Trilinear interpolation is separable on an axis-aligned output lattice,
    so it is applied one axis at a time. Samples beyond the input clamp to the
    nearest edge voxel.
    """
    mode = Interp(mode)
    if vol.kind is Kind.LABEL and mode is not Interp.NEAREST:
        raise BadMode("LABEL volumes must be resampled with NEAREST")
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(not t > 0 for t in target):
        raise ValueError(f"target spacing must be 3 positive values, got {target_spacing}")
    if target == vol.spacing:
        return vol

    dims_out = [max(1, round_half_up(n * s / t)) for n, s, t in zip(vol.dims, vol.spacing, target)]
    data = vol.data.astype(np.float64)
    first = []
    for axis, (n_out, n_in, s, t) in enumerate(zip(dims_out, vol.dims, vol.spacing, target)):
        coords = _axis_coords(n_out, n_in, t / s)
        first.append(coords[0])
        data = _interp_axis(data, coords, axis, mode)

    origin = tuple(vol.index_to_world(first))
    out = data.astype(np.float32)
    if vol.kind is Kind.PROBABILITY:
        out = np.clip(out, 0.0, 1.0)
    return vol.replace(data=out, spacing=target, origin=origin)


def resample_to_grid(vol: Volume3, like: Volume3, mode=Interp.TRILINEAR, fill=None) -> Volume3:
    """Resample ``vol`` onto the voxel grid of ``like`` through world space.

    With ``fill=None`` out-of-support samples clamp to the edge; otherwise
    they take the constant ``fill``.
    """
    mode = Interp(mode)
    if vol.kind is Kind.LABEL and mode is not Interp.NEAREST:
        raise BadMode("LABEL volumes must be resampled with NEAREST")
    if vol.same_grid(like, tol=0.0):
        return vol

    # like-voxel -> world -> vol-voxel is affine: M @ idx + t
    a_like = like.affine
    a_vol_inv = np.linalg.inv(vol.affine)
    m = a_vol_inv @ a_like
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in like.dims], indexing="ij")
    pts = [m[r, 0] * grids[0] + m[r, 1] * grids[1] + m[r, 2] * grids[2] + m[r, 3] for r in range(3)]

    data = vol.data.astype(np.float64)
    dims = vol.dims
    if mode is Interp.NEAREST:
        idx = [np.floor(p + 0.5).astype(np.intp) for p in pts]
        outside = np.zeros(like.dims, dtype=bool)
        for i, n in zip(idx, dims):
            outside |= (i < 0) | (i >= n)
        idx = [np.clip(i, 0, n - 1) for i, n in zip(idx, dims)]
        out = data[idx[0], idx[1], idx[2]]
    else:
        outside = np.zeros(like.dims, dtype=bool)
        for p, n in zip(pts, dims):
            outside |= (p < -0.5) | (p > n - 0.5)
        c = [np.clip(p, 0.0, n - 1) for p, n in zip(pts, dims)]
        i0 = [np.minimum(np.floor(ci).astype(np.intp), n - 1) for ci, n in zip(c, dims)]
        i1 = [np.minimum(i + 1, n - 1) for i, n in zip(i0, dims)]
        w = [ci - i for ci, i in zip(c, i0)]
        out = np.zeros(like.dims)
        for dx in (0, 1):
            wx = w[0] if dx else 1.0 - w[0]
            ix = i1[0] if dx else i0[0]
            for dy in (0, 1):
                wy = w[1] if dy else 1.0 - w[1]
                iy = i1[1] if dy else i0[1]
                for dz in (0, 1):
                    wz = w[2] if dz else 1.0 - w[2]
                    iz = i1[2] if dz else i0[2]
                    out += wx * wy * wz * data[ix, iy, iz]
    if fill is not None:
        out[outside] = fill
    out = out.astype(np.float32)
    if vol.kind is Kind.PROBABILITY:
        out = np.clip(out, 0.0, 1.0)
    return Volume3(out, like.spacing, like.origin, like.direction, vol.kind)


def normalize_ct(vol: Volume3, stats: NormalizationStats = NormalizationStats()) -> Volume3:
    _require_kind(vol, Kind.CT)
    v = np.clip(vol.data.astype(np.float64), stats.clip_lo, stats.clip_hi)
    return vol.with_data(((v - stats.mean) / stats.std).astype(np.float32))


def normalize_pet(vol: Volume3) -> Volume3:
    """Per-image z-score; a constant image maps to zeros."""
    _require_kind(vol, Kind.PET)
    v = vol.data.astype(np.float64)
    mean = v.mean()
    std = max(float(v.std()), 1e-8)
    return vol.with_data(((v - mean) / std).astype(np.float32))
