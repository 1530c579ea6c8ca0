"""Independent reference constructions shared across test modules.

Everything here is deliberately written against the mathematical definitions
rather than the library internals: membership cross-checks lean on explicit
witness transfer, and the brute-force residual grid uses plain loops.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from cpzrepair.cpz import (
    Cpz,
    constraint_residual,
    evaluate_point,
    membership_batch,
)

TOL = 1e-6


def example1_cpz() -> Cpz:
    return Cpz(
        c=[1.0, 0.0],
        G=[[2.0, 1.0, 2.0], [0.0, 0.0, 3.0]],
        E=[[1, 0, 1], [0, 2, 1]],
        A=[[1.0, 0.0, 3.0], [0.0, 1.0, 5.0], [0.0, 0.0, 7.0]],
        b=[2.0, 1.0, 2.0],
        R=[[1, 0, 2], [0, 1, 2]],
        dims=("d1", "d2"),
    )


def ball_cpz(center, d: float, dims=("x", "y", "z")) -> Cpz:
    """Euclidean ball of radius d as a constrained polynomial zonotope.

    Three linear generators scaled by d plus a slack factor a4 tied through
    a1^2+a2^2+a3^2 = (1+a4)/2, which sweeps every radius in [0, d].
    """
    I3 = np.eye(3)
    E = np.vstack([np.eye(3, dtype=int), np.zeros((1, 3), dtype=int)])
    R = np.block(
        [
            [2 * np.eye(3, dtype=int), np.zeros((3, 1), dtype=int)],
            [np.zeros((1, 3), dtype=int), np.ones((1, 1), dtype=int)],
        ]
    )
    return Cpz(
        c=np.asarray(center, dtype=float),
        G=d * I3,
        E=E,
        A=[[1.0, 1.0, 1.0, -0.5]],
        b=[0.5],
        R=R,
        dims=tuple(dims),
    )


def random_cpz(rng: np.random.Generator, dims, max_gens=4, max_factors=4,
               max_cons=2) -> Cpz:
    """Small random CPZ that is feasible by construction (b hit by a draw)."""
    n = len(dims)
    ell = int(rng.integers(1, max_gens + 1))
    p = int(rng.integers(1, max_factors + 1))
    m = int(rng.integers(0, max_cons + 1))
    G = rng.uniform(-1.0, 1.0, (n, ell))
    E = rng.integers(0, 3, (p, ell))
    c = rng.uniform(-0.5, 0.5, n)
    if m:
        q = int(rng.integers(1, 4))
        A = rng.uniform(-1.0, 1.0, (m, q))
        R = rng.integers(0, 3, (p, q))
        a0 = rng.uniform(-1.0, 1.0, p)
        b = A @ np.prod(a0[:, None] ** R, axis=0)
    else:
        q = 0
        A = np.zeros((0, 0))
        R = np.zeros((p, 0), dtype=int)
        b = np.zeros(0)
    return Cpz(c=c, G=G, E=E, A=A, b=b, R=R, dims=tuple(dims))


def grid_min_residual(S: Cpz, steps: int = 201) -> float:
    """Brute-force min constraint residual over a factor grid (p == 2 only).

    Written with explicit loops and scalar arithmetic on purpose: this is the
    independent oracle for the emptiness check.
    """
    assert S.p == 2
    axis = np.linspace(-1.0, 1.0, steps)
    best = np.inf
    A = np.asarray(S.A)
    b = np.asarray(S.b)
    R = np.asarray(S.R)
    for a1 in axis:
        for a2 in axis:
            worst = 0.0
            for i in range(A.shape[0]):
                acc = -b[i]
                for j in range(A.shape[1]):
                    acc += A[i, j] * (a1 ** R[0, j]) * (a2 ** R[1, j])
                worst = max(worst, abs(acc))
            best = min(best, worst)
    return float(best)


def _direct_member(S: Cpz, a: np.ndarray, pt: np.ndarray, tol: float) -> bool:
    a = np.clip(a, -1.0, 1.0)
    if np.max(np.abs(evaluate_point(S, a) - pt)) > tol:
        return False
    return constraint_residual(S, a) <= tol


def composite_agreement(
    S1: Cpz,
    S2: Cpz,
    composite: Cpz,
    pts: np.ndarray,
    mode: str,
    tol: float = TOL,
    band: float = 1e-4,
) -> Tuple[int, int]:
    """Count membership disagreements between a composite set and its oracle.

    Returns (hard, soft): `soft` disagreements involve a witness within the
    `band` tolerance of some boundary, `hard` ones have no such excuse.
    Witnesses are carried both ways so solver misses never masquerade as
    construction errors.
    """
    assert mode in ("and", "or")
    p1, p2 = S1.p, S2.p
    in1, _, W1 = membership_batch(S1, pts, want_witness=True)
    in2, _, W2 = membership_batch(S2, pts, want_witness=True)
    if mode == "and":
        seeds = np.zeros((len(pts), 1, composite.p))
        both = in1 & in2
        seeds[both, 0, :p1] = W1[both]
        seeds[both, 0, p1 : p1 + p2] = W2[both]
        expected = in1 & in2
    else:
        seeds = np.zeros((len(pts), 2, composite.p))
        seeds[in1, 0, :p1] = W1[in1]
        seeds[in1, 0, -1] = 1.0
        seeds[in2, 1, p1 : p1 + p2] = W2[in2]
        seeds[in2, 1, -1] = -1.0
        expected = in1 | in2
    inc, _, Wc = membership_batch(composite, pts, seeds=seeds, want_witness=True)

    hard = soft = 0
    for j in np.flatnonzero(inc & ~expected):
        a = Wc[j]
        ok1 = in1[j] or _direct_member(S1, a[:p1], pts[j], tol)
        ok2 = in2[j] or _direct_member(S2, a[p1 : p1 + p2], pts[j], tol)
        if mode == "and":
            if ok1 and ok2:
                continue  # operand verdicts were solver misses
            near = _direct_member(S1, a[:p1], pts[j], band) and _direct_member(
                S2, a[p1 : p1 + p2], pts[j], band
            )
        else:
            if ok1 or ok2:
                continue
            near = _direct_member(S1, a[:p1], pts[j], band) or _direct_member(
                S2, a[p1 : p1 + p2], pts[j], band
            )
        if near:
            soft += 1
        else:
            hard += 1
    crisp = tol / 4
    for j in np.flatnonzero(expected & ~inc):
        # the seeded composite solve failed: only excusable when the operand
        # witnesses themselves were marginal (not well inside the tolerance)
        d1 = (
            np.max(np.abs(evaluate_point(S1, W1[j]) - pts[j]))
            if in1[j]
            else np.inf
        )
        d2 = (
            np.max(np.abs(evaluate_point(S2, W2[j]) - pts[j]))
            if in2[j]
            else np.inf
        )
        if mode == "and":
            marginal = (d1 > crisp) or (d2 > crisp)
        else:
            marginal = min(d1, d2) > crisp
        if marginal:
            soft += 1
        else:
            hard += 1
    return hard, soft
