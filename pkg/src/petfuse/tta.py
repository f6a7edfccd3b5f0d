"""Mirror test-time augmentation with a voxel-budget variant policy."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DimsMismatch, EmptyList
from .volume import Kind, Volume3


@dataclass(frozen=True, order=True)
class MirrorVariant:
    flip_x: bool = False
    flip_y: bool = False
    flip_z: bool = False

    @property
    def axes(self) -> Tuple[int, ...]:
        return tuple(i for i, f in enumerate((self.flip_x, self.flip_y, self.flip_z)) if f)

    @property
    def is_identity(self) -> bool:
        return not self.axes

    def label(self) -> str:
        return "".join(a for a, f in zip("xyz", (self.flip_x, self.flip_y, self.flip_z)) if f) or "id"


IDENTITY = MirrorVariant()
FULL_SET = tuple(MirrorVariant(*flags) for flags in itertools.product((False, True), repeat=3))
REDUCED_SET = (IDENTITY, MirrorVariant(True, False, False))


@dataclass(frozen=True)
class TtaPolicy:
    voxel_budget: int = 250_000_000
    full_set: Tuple[MirrorVariant, ...] = field(default=FULL_SET)
    reduced_set: Tuple[MirrorVariant, ...] = field(default=REDUCED_SET)

    def __post_init__(self):
        if self.voxel_budget < 1:
            raise ValueError("voxel_budget must be positive")
        if IDENTITY not in self.full_set or IDENTITY not in self.reduced_set:
            raise ValueError("identity variant must be in every variant set")
        if not set(self.reduced_set) <= set(self.full_set):
            raise ValueError("reduced_set must be a subset of full_set")


def select_variants(dims: Sequence[int], policy: TtaPolicy = TtaPolicy()) -> List[MirrorVariant]:
    nvox = int(np.prod([int(d) for d in dims], dtype=object))
    chosen = policy.full_set if nvox <= policy.voxel_budget else policy.reduced_set
    return sorted(chosen)


def apply_mirror(vol: Volume3, variant: MirrorVariant) -> Volume3:
    """Reverse data along the flagged axes; geometry is left untouched."""
    if variant.is_identity:
        return vol
    return vol.with_data(np.flip(vol.data, axis=variant.axes))


def aggregate_tta(predictions: List[Tuple[MirrorVariant, Volume3]]) -> Volume3:
    """Un-mirror each prediction and average them in list order."""
    if not predictions:
        raise EmptyList("no TTA predictions to aggregate")
    dims = predictions[0][1].dims
    acc = np.zeros(dims, dtype=np.float64)
    for variant, pred in predictions:
        if pred.dims != dims:
            raise DimsMismatch(f"prediction dims {pred.dims} != {dims}")
        acc += apply_mirror(pred, variant).data
    acc /= len(predictions)
    ref = predictions[0][1]
    return ref.with_data(np.clip(acc, 0.0, 1.0).astype(np.float32), kind=Kind.PROBABILITY)
