"""3D volumes with physical-space metadata.

Data is held as a numpy array indexed ``[x, y, z]``. The canonical linear
order is x-fastest (Fortran order), which is also the NIfTI on-disk order;
:func:`ravel_index` / :func:`unravel_index` and :attr:`Volume3.flat` expose it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from .errors import InvalidVolume, OutOfRange

Triple = Tuple[float, float, float]
IntTriple = Tuple[int, int, int]

ORTHO_TOL = 1e-6


class Kind(str, Enum):
    CT = "CT"
    PET = "PET"
    PROBABILITY = "PROBABILITY"
    LABEL = "LABEL"


def ravel_index(idx: Sequence[int], dims: Sequence[int]) -> int:
    """Linear x-fastest offset of voxel ``idx`` in a grid of ``dims``."""
    x, y, z = idx
    nx, ny, nz = dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise OutOfRange(f"index {tuple(idx)} outside dims {tuple(dims)}")
    return int(x + nx * (y + ny * z))


def unravel_index(i: int, dims: Sequence[int]) -> IntTriple:
    nx, ny, nz = dims
    if not 0 <= i < nx * ny * nz:
        raise OutOfRange(f"linear index {i} outside {nx * ny * nz} voxels")
    x = i % nx
    y = (i // nx) % ny
    z = i // (nx * ny)
    return int(x), int(y), int(z)


def _as_triple(values, name, cast=float):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise InvalidVolume(f"{name} must have 3 components, got {len(t)}")
    return t


def _check_values(data, kind):
    if kind is Kind.PROBABILITY:
        if not (np.all(data >= 0) and np.all(data <= 1)):
            raise InvalidVolume("PROBABILITY values must lie in [0, 1]")
    elif kind is Kind.LABEL:
        if not np.all((data == 0) | (data == 1)):
            raise InvalidVolume("LABEL values must be 0 or 1")


@dataclass(frozen=True, eq=False)
class Volume3:
    """Immutable scalar 3D grid.

    ``direction`` columns map voxel axes to world axes; world position of voxel
    ``idx`` is ``origin + direction @ (idx * spacing)``.
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: Kind = Kind.CT

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvalidVolume(f"data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvalidVolume(f"all dims must be >= 1, got {data.shape}")
        data.setflags(write=False)

        spacing = _as_triple(self.spacing, "spacing")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvalidVolume(f"spacing must be positive, got {spacing}")
        origin = _as_triple(self.origin, "origin")

        direction = np.array(self.direction, dtype=np.float64)
        if direction.shape != (3, 3):
            raise InvalidVolume(f"direction must be 3x3, got {direction.shape}")
        if not np.allclose(direction.T @ direction, np.eye(3), rtol=0, atol=ORTHO_TOL):
            raise InvalidVolume("direction columns must be orthonormal")
        direction.setflags(write=False)

        kind = Kind(self.kind)
        _check_values(data, kind)

        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "kind", kind)

    def validate(self) -> None:
        """Re-check value invariants (e.g. before serialising)."""
        if np.ndim(self.data) != 3:
            raise InvalidVolume("data must be 3D")
        _check_values(self.data, self.kind)

    @property
    def dims(self) -> IntTriple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def flat(self) -> np.ndarray:
        """Data in canonical x-fastest linear order."""
        return self.data.ravel(order="F")

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)
        aff[:3, 3] = self.origin
        return aff

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def replace(self, **changes) -> "Volume3":
        return dataclasses.replace(self, **changes)

    def with_data(self, data, kind=None) -> "Volume3":
        return dataclasses.replace(self, data=data, kind=self.kind if kind is None else kind)

    def index_to_world(self, idx) -> np.ndarray:
        """Like :meth:`voxel_to_world` but accepts fractional or out-of-grid indices."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + self.direction @ (idx * np.asarray(self.spacing))

    def voxel_to_world(self, idx: Sequence[int]) -> np.ndarray:
        i = _as_triple(idx, "idx", cast=int)
        if any(not 0 <= a < n for a, n in zip(i, self.dims)):
            raise OutOfRange(f"index {i} outside dims {self.dims}")
        return self.index_to_world(i)

    def world_to_voxel(self, point) -> np.ndarray:
        """Continuous voxel coordinates of a world point (mm)."""
        d = np.asarray(point, dtype=np.float64) - np.asarray(self.origin)
        return (self.direction.T @ d) / np.asarray(self.spacing)

    def same_grid(self, other: "Volume3", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )


@dataclass(frozen=True)
class BoundingBox:
    """Half-open voxel box ``[lo, hi)``. May extend past a grid when padding."""

    lo: IntTriple
    hi: IntTriple

    def __post_init__(self):
        lo = _as_triple(self.lo, "lo", cast=int)
        hi = _as_triple(self.hi, "hi", cast=int)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> IntTriple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def is_valid_for(self, dims: Sequence[int]) -> bool:
        return all(0 <= l < h <= n for l, h, n in zip(self.lo, self.hi, dims))

    def contains(self, other: "BoundingBox") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )

    def dilate(self, pad: Sequence[int]) -> "BoundingBox":
        return BoundingBox(
            tuple(l - p for l, p in zip(self.lo, pad)),
            tuple(h + p for h, p in zip(self.hi, pad)),
        )
