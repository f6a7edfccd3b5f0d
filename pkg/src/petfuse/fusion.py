"""Label fusion: binary STAPLE, majority vote and mean-probability fusion.

STAPLE here is the classic binary EM with a fixed global prior. Voxels that
received the same vector of rater decisions share one posterior, so the
E-step is evaluated once per distinct decision pattern (at most ``2**R``) and
scattered back. All reductions use exactly rounded sums (``math.fsum``), which
makes the result independent of rater order, chunking and worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EmptyList, GridMismatch
from .volume import Kind, Volume3


@dataclass(frozen=True)
class RaterStack:
    masks: Tuple[Volume3, ...]

    def __post_init__(self):
        masks = tuple(self.masks)
        if not masks:
            raise EmptyList("a rater stack needs at least one mask")
        _check_same_grid(masks)
        for m in masks:
            if m.kind is not Kind.LABEL:
                raise GridMismatch(f"rater masks must be LABEL volumes, got {m.kind.value}")
        object.__setattr__(self, "masks", masks)

    def __len__(self):
        return len(self.masks)

    def decisions(self) -> np.ndarray:
        """(voxels, raters) boolean matrix in x-fastest voxel order."""
        return np.stack([m.flat > 0.5 for m in self.masks], axis=1)


@dataclass(frozen=True)
class StapleParams:
    init_p: float = 0.99
    init_q: float = 0.99
    prior_gamma: Optional[float] = None  # None = AUTO
    tol: float = 1e-7
    max_iters: int = 100
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if not (0 < self.init_p < 1 and 0 < self.init_q < 1):
            raise ValueError("init_p and init_q must lie in (0, 1)")
        if self.prior_gamma is not None and not 0 < self.prior_gamma < 1:
            raise ValueError("prior_gamma must lie in (0, 1) or be AUTO")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")

    def to_dict(self):
        d = dict(self.__dict__)
        d["prior_gamma"] = "AUTO" if self.prior_gamma is None else self.prior_gamma
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("prior_gamma") == "AUTO":
            d["prior_gamma"] = None
        return cls(**d)


@dataclass(eq=False)
class FusionResult:
    consensus: Volume3
    weights: Volume3
    p: Tuple[float, ...]
    q: Tuple[float, ...]
    iters: int
    converged: bool
    degenerate: Optional[str] = None
    delta_history: List[float] = field(default_factory=list)
    # (W, p, q) after each iteration; filled only when tracing
    history: List[Tuple[np.ndarray, Tuple[float, ...], Tuple[float, ...]]] = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "p": list(self.p),
            "q": list(self.q),
            "iters": self.iters,
            "converged": self.converged,
            "degenerate": self.degenerate,
        }


def _check_same_grid(vols: Sequence[Volume3]):
    ref = vols[0]
    for v in vols[1:]:
        if v.dims != ref.dims or not np.allclose(v.spacing, ref.spacing, rtol=0, atol=1e-6):
            raise GridMismatch(f"grid {v.dims}@{v.spacing} != {ref.dims}@{ref.spacing}")


def _as_stack(stack) -> RaterStack:
    return stack if isinstance(stack, RaterStack) else RaterStack(tuple(stack))


def _decision_patterns(D):
    n_raters = D.shape[1]
    if n_raters <= 62:
        codes = D.astype(np.int64) @ (np.int64(1) << np.arange(n_raters, dtype=np.int64))
        uniq, first, inverse, counts = np.unique(
            codes, return_index=True, return_inverse=True, return_counts=True)
        patterns = D[first]
    else:
        patterns, inverse, counts = np.unique(D, axis=0, return_inverse=True, return_counts=True)
    return patterns, inverse.ravel(), counts


def staple_e_step(patterns, p, q, gamma):
    """Posterior foreground probability for each decision pattern (log space)."""
    log_p, log_1p = np.log(p), np.log1p(-np.asarray(p))
    log_q, log_1q = np.log(q), np.log1p(-np.asarray(q))
    la = np.empty(len(patterns))
    lb = np.empty(len(patterns))
    lg, l1g = math.log(gamma), math.log1p(-gamma)
    for k, d in enumerate(patterns):
        la[k] = math.fsum([lg, *np.where(d, log_p, log_1p)])
        lb[k] = math.fsum([l1g, *np.where(d, log_1q, log_q)])
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(lb - la))


def staple(stack: Union[RaterStack, Sequence[Volume3]], params: StapleParams = StapleParams(),
           trace: bool = False) -> FusionResult:
    """Binary STAPLE.

    Each iteration runs an E-step (posterior ``W`` from current ``p``, ``q``)
    then an M-step (``p``, ``q`` from ``W``). It stops once the largest change
    in ``W`` between consecutive E-steps drops below ``tol``, or after
    ``max_iters`` iterations. Consensus is ``W >= 0.5``.

    Unanimously empty or unanimously full stacks short-circuit with
    ``iters == 0`` and ``degenerate`` set instead of raising.
    """
    stack = _as_stack(stack)
    ref = stack.masks[0]
    D = stack.decisions()
    n_vox, n_raters = D.shape
    eps = params.clamp_eps

    if not D.any() or D.all():
        full = bool(D.all())
        w = np.full(ref.dims, 1.0 if full else 0.0, dtype=np.float32)
        return FusionResult(
            consensus=ref.with_data(w, kind=Kind.LABEL),
            weights=ref.with_data(w, kind=Kind.PROBABILITY),
            p=(params.init_p,) * n_raters,
            q=(params.init_q,) * n_raters,
            iters=0,
            converged=True,
            degenerate="ALL_FULL" if full else "ALL_EMPTY",
        )

    if params.prior_gamma is None:
        gamma = math.fsum(int(c) for c in D.sum(axis=0)) / (n_vox * n_raters)
    else:
        gamma = params.prior_gamma
    gamma = min(max(gamma, 1e-6), 1 - 1e-6)

    patterns, inverse, counts = _decision_patterns(D)
    counts = counts.astype(np.float64)
    p = np.full(n_raters, params.init_p)
    q = np.full(n_raters, params.init_q)

    w_prev = None
    converged = False
    deltas = []
    history = []
    it = 0
    for it in range(1, params.max_iters + 1):
        w = staple_e_step(patterns, p, q, gamma)

        cw = counts * w
        cnw = counts * (1.0 - w)
        den_p = math.fsum(cw)
        den_q = math.fsum(cnw)
        for j in range(n_raters):
            dj = patterns[:, j]
            if den_p > 0:
                p[j] = math.fsum(cw[dj]) / den_p
            if den_q > 0:
                q[j] = math.fsum(cnw[~dj]) / den_q
        np.clip(p, eps, 1 - eps, out=p)
        np.clip(q, eps, 1 - eps, out=q)

        delta = math.inf if w_prev is None else float(np.max(np.abs(w - w_prev)))
        deltas.append(delta)
        if trace:
            history.append((_scatter(w, inverse, ref.dims), tuple(p.tolist()), tuple(q.tolist())))
        w_prev = w
        if delta < params.tol:
            converged = True
            break

    weights = _scatter(w_prev, inverse, ref.dims)
    return FusionResult(
        consensus=ref.with_data(weights >= 0.5, kind=Kind.LABEL),
        weights=ref.with_data(np.clip(weights, 0.0, 1.0).astype(np.float32), kind=Kind.PROBABILITY),
        p=tuple(p.tolist()),
        q=tuple(q.tolist()),
        iters=it,
        converged=converged,
        delta_history=deltas,
        history=history,
    )


def _scatter(w_patterns, inverse, dims):
    return w_patterns[inverse].reshape(dims, order="F")


def majority_vote(stack: Union[RaterStack, Sequence[Volume3]]) -> Volume3:
    """Foreground needs at least ceil((R+1)/2) votes, so even ties go to background."""
    stack = _as_stack(stack)
    n = len(stack)
    votes = np.zeros(stack.masks[0].dims, dtype=np.int64)
    for m in stack.masks:
        votes += m.data > 0.5
    need = -(-(n + 1) // 2)
    return stack.masks[0].with_data(votes >= need, kind=Kind.LABEL)


def mean_prob_fusion(maps: Sequence[Volume3], threshold: float = 0.5) -> Volume3:
    maps = list(maps)
    if not maps:
        raise EmptyList("no probability maps to fuse")
    _check_same_grid(maps)
    acc = np.zeros(maps[0].dims, dtype=np.float64)
    for m in maps:
        acc += m.data
    acc /= len(maps)
    return maps[0].with_data(acc >= threshold, kind=Kind.LABEL)
