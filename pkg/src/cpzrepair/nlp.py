"""Batched box-constrained nonlinear least squares.

Every set query in this package (membership, distance, feasibility) reduces to
minimizing 0.5*||r(a)||^2 over a box. scipy's solvers handle one problem per
call with noticeable per-call overhead; the acceptance suite needs hundreds of
thousands of tiny solves, so we run Levenberg-Marquardt over a whole batch of
start points (and often a whole batch of query points) in vectorized numpy.
Bounds are handled by clamping plus an active-set mask on the normal equations,
which is adequate for these small (p <= ~20) problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

# fun(a, rows, need_jac) gets iterates (B', p) plus their original batch row
# indices (B',), needed when residuals differ per row (e.g. per-point targets),
# and returns residuals (B', r) plus Jacobians (B', r, p) or None when
# need_jac is False (probe evaluations skip the Jacobian work).
ResidualFn = Callable[[np.ndarray, np.ndarray, bool], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class NlpOptions:
    """Shared solver knobs: 16 uniform restarts, 200 LM iterations each."""

    restarts: int = 16
    max_iters: int = 200
    penalty_weight: float = 10.0
    f_tol: float = 1e-18
    g_tol: float = 1e-11
    step_tol: float = 1e-13


DEFAULT_OPTIONS = NlpOptions()


@dataclass
class LmResult:
    a: np.ndarray          # (B, p) final iterates
    f: np.ndarray          # (B,) final objective values 0.5*||r||^2
    iters: int
    converged: np.ndarray  # (B,) True where a first-order stop fired (not a stall)


def default_starts(p: int, count: int) -> np.ndarray:
    """Deterministic start block: the origin plus fixed uniform draws.

    Keyed only by p so repeated queries of same-sized problems reuse identical
    starts; determinism of every caller follows from determinism here.
    """
    if count < 1:
        raise ValueError("need at least one start")
    if p == 0:
        return np.zeros((1, 0))
    rng = np.random.default_rng(0x5EED0 + 7919 * p)
    pts = rng.uniform(-1.0, 1.0, size=(count - 1, p))
    return np.vstack([np.zeros((1, p)), pts])


def lm_least_squares(
    fun: ResidualFn,
    a0: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    *,
    max_iters: int = 200,
    f_tol: float = 1e-18,
    g_tol: float = 1e-11,
    step_tol: float = 1e-13,
    lam0: float = 1e-3,
    lam_max: float = 1e9,
) -> LmResult:
    """Minimize 0.5*||fun(a)||^2 within [lb, ub] for every row of a0 at once."""
    a = np.atleast_2d(np.asarray(a0, dtype=float)).copy()
    B, p = a.shape
    lb = np.broadcast_to(np.asarray(lb, dtype=float), (B, p)).copy() if p else np.zeros((B, 0))
    ub = np.broadcast_to(np.asarray(ub, dtype=float), (B, p)).copy() if p else np.zeros((B, 0))
    if B == 0:
        return LmResult(a=a, f=np.zeros(0), iters=0, converged=np.zeros(0, bool))
    np.clip(a, lb, ub, out=a)

    r, J = fun(a, np.arange(B), True)
    f = 0.5 * np.einsum("br,br->b", r, r)
    if p == 0:
        return LmResult(a=a, f=f, iters=0, converged=np.ones(B, bool))

    lam = np.full(B, lam0)
    done = f <= f_tol
    converged = done.copy()
    pinned = ub - lb <= 0.0
    dd = np.arange(p)
    # windowed stagnation detector: a row that cannot shave 10% off f within
    # 10 iterations is parked (polish steps, not LM, provide final precision)
    f_win = f.copy()
    win_age = np.zeros(B, dtype=np.int64)

    it = 0
    for it in range(1, max_iters + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        aw, rw, Jw = a[idx], r[idx], J[idx]
        lbw, ubw = lb[idx], ub[idx]
        g = np.einsum("brp,br->bp", Jw, rw)
        blocked = (
            pinned[idx]
            | ((aw <= lbw + 1e-12) & (g > 0.0))
            | ((aw >= ubw - 1e-12) & (g < 0.0))
        )
        pg = np.where(blocked, 0.0, g)
        grad_ok = np.max(np.abs(pg), axis=1) <= g_tol

        H = np.einsum("brp,brq->bpq", Jw, Jw)
        mask = blocked[:, :, None] | blocked[:, None, :]
        H = np.where(mask, 0.0, H)
        diag = H[:, dd, dd]
        H[:, dd, dd] = np.where(
            blocked, 1.0, diag + lam[idx][:, None] * (diag + 1e-10) + 1e-12
        )
        try:
            v = -np.linalg.solve(H, pg[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            H[:, dd, dd] += 1e-8
            v = -np.linalg.solve(H, pg[:, :, None])[:, :, 0]

        # Geodesic acceleration (Transtrum-style second-order correction):
        # penalty terms carve curved valleys where first-order LM crawls; a
        # directional-curvature probe along v restores fast progress. Kept
        # only where the correction stays subordinate to the velocity step.
        h = 0.1
        r_probe = fun(aw + h * v, idx, False)[0]
        Jv = np.einsum("brp,bp->br", Jw, v)
        k = (2.0 / h) * ((r_probe - rw) / h - Jv)
        rhs = np.where(blocked, 0.0, -np.einsum("brp,br->bp", Jw, k))
        acc = 0.5 * np.linalg.solve(H, rhs[:, :, None])[:, :, 0]
        small = np.linalg.norm(acc, axis=1) <= 0.75 * np.linalg.norm(v, axis=1)
        step = v + np.where(small[:, None], acc, 0.0)

        cand = np.clip(aw + step, lbw, ubw)
        real_step = np.max(np.abs(cand - aw), axis=1)

        r2, J2 = fun(cand, idx, True)
        f2 = 0.5 * np.einsum("br,br->b", r2, r2)
        better = f2 < f[idx]

        acc = np.flatnonzero(better)
        gidx = idx[acc]
        a[gidx] = cand[acc]
        r[gidx] = r2[acc]
        J[gidx] = J2[acc]
        f[gidx] = f2[acc]
        lam[gidx] = np.maximum(lam[gidx] * 0.33, 1e-12)
        rej = idx[~better]
        lam[rej] = lam[rej] * 4.0

        win_age[idx] += 1
        expired = win_age[idx] >= 10
        stagnant = expired & (f[idx] > 0.90 * f_win[idx])
        renew = idx[expired]
        f_win[renew] = f[renew]
        win_age[renew] = 0

        # stopping: solved, first-order stationary, step exhausted, or stalled
        solved = f[idx] <= f_tol
        tiny_step = better & (real_step <= step_tol)
        stalled = ((~better) & (lam[idx] >= lam_max)) | stagnant
        stop_conv = solved | grad_ok | tiny_step
        converged[idx] |= stop_conv
        done[idx] |= stop_conv | stalled

    return LmResult(a=a, f=f, iters=it, converged=converged)
