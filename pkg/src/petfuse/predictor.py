"""Pluggable per-patch foreground-probability predictors.

Three bindings exist:

* ``THRESHOLD`` - sigmoid of normalised PET around a threshold.
* ``ORACLE`` - a smoothed, optionally noised copy of a ground-truth patch that
  the caller supplies out of band. Used to simulate ensemble members.
* ``EXTERNAL`` - spawns a command per patch and exchanges NIfTI files with it.
"""
from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
import threading
import uuid
import zlib
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimsMismatch, ExternalFailure, PetfuseError
from .nifti import read_nifti, write_nifti
from .volume import Kind, Volume3


class PredictorKind(str, Enum):
    THRESHOLD = "THRESHOLD"
    ORACLE = "ORACLE"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class PredictorBinding:
    kind: PredictorKind = PredictorKind.THRESHOLD
    threshold_t: float = 2.5
    smooth_sigma_mm: float = 2.0
    noise_amp: float = 0.0
    seed: int = 0
    command: Optional[str] = None
    max_processes: int = 4
    timeout_s: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PredictorKind(self.kind))
        if self.smooth_sigma_mm < 0:
            raise ValueError("smooth_sigma_mm must be >= 0")
        if not 0 <= self.noise_amp < 0.5:
            raise ValueError("noise_amp must lie in [0, 0.5)")
        if self.kind is PredictorKind.EXTERNAL and not self.command:
            raise ValueError("EXTERNAL binding needs a command")
        if self.max_processes < 1:
            raise ValueError("max_processes must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PatchContext:
    """Out-of-band per-patch inputs.

    ``key`` identifies the patch for noise seeding (e.g. case hash, TTA
    variant, placement index); the binding seed is always mixed in.
    """

    truth: Optional[Volume3] = None
    key: Sequence[int] = ()
    workdir: Optional[str] = None


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _smooth(data, sigma_mm, spacing):
    if sigma_mm <= 0:
        return data
    sigma = [sigma_mm / s for s in spacing]
    return ndimage.gaussian_filter(data, sigma=sigma, mode="nearest")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _predict_threshold(binding, pet):
    pet_data = pet.data.astype(np.float64)
    prob = _sigmoid((pet_data - binding.threshold_t) / 0.5)
    return _smooth(prob, binding.smooth_sigma_mm, pet.spacing)


def _predict_oracle(binding, pet, ctx):
    if ctx.truth is None:
        raise PetfuseError("ORACLE predictor needs a ground-truth patch")
    if ctx.truth.dims != pet.dims:
        raise DimsMismatch(f"truth dims {ctx.truth.dims} != patch dims {pet.dims}")
    prob = _smooth(ctx.truth.data.astype(np.float64), binding.smooth_sigma_mm, pet.spacing)
    if binding.noise_amp > 0:
        seq = np.random.SeedSequence([int(binding.seed) & 0xFFFFFFFF, *[int(k) for k in ctx.key]])
        rng = np.random.Generator(np.random.PCG64(seq))
        prob = prob + rng.uniform(-binding.noise_amp, binding.noise_amp, size=prob.shape)
    return prob


_process_slots = {}
_slots_lock = threading.Lock()


def _slot_for(binding):
    with _slots_lock:
        key = (binding.command, binding.max_processes)
        if key not in _process_slots:
            _process_slots[key] = threading.BoundedSemaphore(binding.max_processes)
        return _process_slots[key]


def _predict_external(binding, ct, pet, ctx):
    with tempfile.TemporaryDirectory(dir=ctx.workdir, prefix="petfuse-ext-") as workdir:
        tag = uuid.uuid4().hex
        write_nifti(ct, os.path.join(workdir, f"{tag}_ct.nii.gz"))
        write_nifti(pet, os.path.join(workdir, f"{tag}_pet.nii.gz"))
        cmd = shlex.split(binding.command) + [tag, workdir]
        with _slot_for(binding):
            try:
                proc = subprocess.run(cmd, capture_output=True, timeout=binding.timeout_s)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ExternalFailure(f"could not run {cmd[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            err = proc.stderr.decode(errors="replace").strip()[-500:]
            raise ExternalFailure(f"{cmd[0]!r} exited with {proc.returncode}: {err}")
        out_path = os.path.join(workdir, f"{tag}_prob.nii.gz")
        if not os.path.exists(out_path):
            raise ExternalFailure(f"{cmd[0]!r} produced no {tag}_prob.nii.gz")
        try:
            reply = read_nifti(out_path, kind=Kind.PET)
        except PetfuseError as exc:
            raise ExternalFailure(f"malformed reply: {exc}") from exc
    if reply.dims != pet.dims:
        raise ExternalFailure(f"reply dims {reply.dims} != patch dims {pet.dims}")
    if not np.all(np.isfinite(reply.data)):
        raise ExternalFailure("reply contains non-finite values")
    return reply.data


def predict(binding: PredictorBinding, ct_patch: Volume3, pet_patch: Volume3,
            ctx: PatchContext = PatchContext()) -> Volume3:
    """Foreground probability for one patch, always clamped to [0, 1]."""
    if ct_patch.dims != pet_patch.dims:
        raise DimsMismatch(f"CT dims {ct_patch.dims} != PET dims {pet_patch.dims}")
    if not np.allclose(ct_patch.spacing, pet_patch.spacing, rtol=0, atol=1e-6):
        raise DimsMismatch(f"CT spacing {ct_patch.spacing} != PET spacing {pet_patch.spacing}")

    if binding.kind is PredictorKind.THRESHOLD:
        prob = _predict_threshold(binding, pet_patch)
    elif binding.kind is PredictorKind.ORACLE:
        prob = _predict_oracle(binding, pet_patch, ctx)
    else:
        prob = _predict_external(binding, ct_patch, pet_patch, ctx)
    prob = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0).astype(np.float32)
    return pet_patch.with_data(prob, kind=Kind.PROBABILITY)
