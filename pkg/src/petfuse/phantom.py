"""Synthetic PET/CT cases with known lesion geometry."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .nifti import write_nifti
from .volume import Kind, Volume3


@dataclass(frozen=True)
class Lesion:
    center: Tuple[float, float, float]  # voxel coordinates
    radius: float  # voxels


def default_lesions(dims):
    nx, ny, nz = dims
    return (
        Lesion((0.38 * nx, 0.45 * ny, 0.40 * nz), 0.08 * min(dims)),
        Lesion((0.62 * nx, 0.55 * ny, 0.60 * nz), 0.10 * min(dims)),
    )


def make_phantom(dims=(96, 96, 96), spacing=(2.0, 2.0, 2.0), body_fraction=(0.42, 0.36, 0.45),
                 lesions: Sequence[Lesion] = None, pet_background=0.5, lesion_uptake=8.0,
                 origin=(0.0, 0.0, 0.0)):
    """Return ``(ct, pet, gt)``.

    CT is a 0 HU ellipsoidal body in -1000 HU air; PET is a flat background with
    hot spherical lesions; ``gt`` marks the lesions.
    """
    dims = tuple(int(d) for d in dims)
    lesions = default_lesions(dims) if lesions is None else lesions
    gx, gy, gz = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    c = [(n - 1) / 2.0 for n in dims]
    semi = [f * n for f, n in zip(body_fraction, dims)]
    body = ((gx - c[0]) / semi[0]) ** 2 + ((gy - c[1]) / semi[1]) ** 2 + ((gz - c[2]) / semi[2]) ** 2 <= 1

    gt = np.zeros(dims, dtype=bool)
    for les in lesions:
        d2 = (gx - les.center[0]) ** 2 + (gy - les.center[1]) ** 2 + (gz - les.center[2]) ** 2
        gt |= d2 <= les.radius ** 2
    gt &= body

    ct = np.where(body, 0.0, -1000.0)
    pet = np.where(gt, lesion_uptake, pet_background)
    geo = dict(spacing=spacing, origin=origin)
    return (
        Volume3(ct, kind=Kind.CT, **geo),
        Volume3(pet, kind=Kind.PET, **geo),
        Volume3(gt, kind=Kind.LABEL, **geo),
    )


def write_phantom(out_dir, prefix="phantom", **kwargs):
    """Write a phantom case; returns dict with ``ct``, ``pet`` and ``gt`` paths."""
    os.makedirs(out_dir, exist_ok=True)
    ct, pet, gt = make_phantom(**kwargs)
    paths = {k: os.path.join(out_dir, f"{prefix}_{k}.nii.gz") for k in ("ct", "pet", "gt")}
    write_nifti(ct, paths["ct"])
    write_nifti(pet, paths["pet"])
    write_nifti(gt, paths["gt"])
    return paths
