"""Overlapping patch placement and Gaussian-weighted aggregation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import MissingPatch, OutOfGrid
from .volume import IntTriple, Kind, Volume3

DEFAULT_PATCH_SIZE = (224, 192, 224)
WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class PatchGrid:
    dims: IntTriple
    patch_size: IntTriple
    step: IntTriple
    placements: Tuple[IntTriple, ...]
    padded_dims: IntTriple

    @property
    def pad_offset(self) -> IntTriple:
        """Low-side padding added in front of the volume, per axis."""
        return tuple((p - d) // 2 for p, d in zip(self.padded_dims, self.dims))

    def index_of(self) -> dict:
        return {o: i for i, o in enumerate(self.placements)}


@dataclass(frozen=True, eq=False)
class WeightKernel:
    size: IntTriple
    weights: np.ndarray


def _axis_origins(padded, patch, step):
    span = padded - patch
    n = -(-span // step) + 1  # ceil
    if n == 1:
        return [0]
    # round-half-up of i * span / (n - 1) in exact integer arithmetic
    return [(2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def plan_patches(dims: Sequence[int], patch_size: Sequence[int] = DEFAULT_PATCH_SIZE,
                 overlap_frac: float = 0.5) -> PatchGrid:
    dims = tuple(int(d) for d in dims)
    patch_size = tuple(int(p) for p in patch_size)
    if any(p < 1 for p in patch_size):
        raise ValueError(f"patch size must be >= 1 per axis, got {patch_size}")
    if not 0 <= overlap_frac < 1:
        raise ValueError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    padded = tuple(max(d, p) for d, p in zip(dims, patch_size))
    step = tuple(max(1, math.floor(p * (1 - overlap_frac))) for p in patch_size)
    per_axis = [_axis_origins(P, p, s) for P, p, s in zip(padded, patch_size, step)]
    placements = tuple(tuple(int(v) for v in o) for o in itertools.product(*per_axis))
    return PatchGrid(dims, patch_size, step, placements, padded)


def gaussian_kernel(patch_size: Sequence[int], sigma_scale: float = 1.0 / 8) -> WeightKernel:
    """Separable Gaussian centred in the patch, peak 1, floored at 1e-8."""
    factors = []
    for p in patch_size:
        sigma = p * sigma_scale
        x = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * sigma * sigma))
        factors.append(g / g.max())
    w = factors[0][:, None, None] * factors[1][None, :, None] * factors[2][None, None, :]
    w = np.maximum(w, WEIGHT_FLOOR)
    w.setflags(write=False)
    return WeightKernel(tuple(int(p) for p in patch_size), w)


def extract_patch(vol: Volume3, origin: Sequence[int], patch_size: Sequence[int],
                  pad_value: float = 0.0) -> Volume3:
    """Cut a patch addressed in padded-grid coordinates.

    The padded grid is ``max(vol.dims, patch_size)`` with the volume centred in
    it, matching :func:`plan_patches`. Voxels outside the volume get
    ``pad_value``. The patch keeps world geometry of the voxels it covers.
    """
    origin = tuple(int(o) for o in origin)
    patch_size = tuple(int(p) for p in patch_size)
    padded = tuple(max(d, p) for d, p in zip(vol.dims, patch_size))
    if any(o < 0 or o + p > P for o, p, P in zip(origin, patch_size, padded)):
        raise OutOfGrid(f"patch at {origin} size {patch_size} leaves padded grid {padded}")
    offset = tuple((P - d) // 2 for P, d in zip(padded, vol.dims))
    start = tuple(o - f for o, f in zip(origin, offset))

    if all(s >= 0 and s + p <= d for s, p, d in zip(start, patch_size, vol.dims)):
        data = vol.data[tuple(slice(s, s + p) for s, p in zip(start, patch_size))]
    else:
        data = np.full(patch_size, pad_value, dtype=np.float32)
        src, dst = [], []
        for s, p, d in zip(start, patch_size, vol.dims):
            a, b = max(s, 0), min(s + p, d)
            src.append(slice(a, b))
            dst.append(slice(a - s, b - s))
        data[tuple(dst)] = vol.data[tuple(src)]
    return vol.replace(data=data, origin=tuple(vol.index_to_world(start)))


def aggregate(patch_outputs: List[Tuple[Sequence[int], Volume3]], grid: PatchGrid,
              kernel: WeightKernel, dims: Sequence[int] = None) -> Volume3:
    """Weighted average of overlapping patch probabilities.

    Outputs are reduced in placement-index order whatever order they arrive
    in, so the result does not depend on scheduling.
    """
    dims = grid.dims if dims is None else tuple(int(d) for d in dims)
    if dims != grid.dims:
        raise MissingPatch(f"dims {dims} do not match the planned grid {grid.dims}")
    index = grid.index_of()
    slots = [None] * len(grid.placements)
    for origin, out in patch_outputs:
        key = tuple(int(o) for o in origin)
        i = index.get(key)
        if i is None:
            raise MissingPatch(f"output at {key} matches no placement")
        if slots[i] is not None:
            raise MissingPatch(f"duplicate output for placement {key}")
        if out.dims != grid.patch_size:
            raise MissingPatch(f"patch output dims {out.dims} != patch size {grid.patch_size}")
        slots[i] = out
    missing = [grid.placements[i] for i, s in enumerate(slots) if s is None]
    if missing:
        raise MissingPatch(f"{len(missing)} placement(s) without output, first {missing[0]}")

    num = np.zeros(grid.padded_dims, dtype=np.float64)
    den = np.zeros(grid.padded_dims, dtype=np.float64)
    w = kernel.weights
    for origin, out in zip(grid.placements, slots):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, grid.patch_size))
        num[sl] += w * out.data
        den[sl] += w

    offset = grid.pad_offset
    crop = tuple(slice(f, f + d) for f, d in zip(offset, dims))
    prob = np.clip(num[crop] / den[crop], 0.0, 1.0).astype(np.float32)

    ref = slots[0]
    start = tuple(o - f for o, f in zip(grid.placements[0], offset))
    vol_origin = ref.index_to_world(tuple(-s for s in start))
    return Volume3(prob, ref.spacing, tuple(vol_origin), ref.direction, Kind.PROBABILITY)
