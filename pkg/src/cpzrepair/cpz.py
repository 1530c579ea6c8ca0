"""Constrained polynomial zonotope (CPZ) algebra.

A CPZ is the point set

    { c + sum_j (prod_k a_k^{E[k,j]}) G[:,j]  :
      sum_j (prod_k a_k^{R[k,j]}) A[:,j] = b,  a_k in [-1, 1] }

with named, ordered dimensions attached so sets living in different spaces can
be aligned.  All operations are pure; arrays are frozen after construction.
Membership, distance, emptiness, and sampling are nonlinear programs solved by
multi-start batched Levenberg-Marquardt (see nlp.py) with an optional SLSQP
polish where constraint feasibility must be tight.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize as sciopt

from .nlp import DEFAULT_OPTIONS, NlpOptions, default_starts, lm_least_squares

FEASIBILITY_TOL = 1e-6
MEMBERSHIP_TOL = 1e-6


@dataclass(frozen=True)
class DimensionInfo:
    """A named bounded dimension; extent and midpoint feed unification."""

    id: str
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not self.id or any(ch.isspace() for ch in self.id):
            raise ValueError(f"dimension id must be non-empty and whitespace-free: {self.id!r}")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"bounds of {self.id} must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"bounds of {self.id} must satisfy lower < upper")

    @property
    def extent(self) -> float:
        return self.upper - self.lower

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.upper + self.lower)


BoundsLike = Union[
    Mapping[str, Union[DimensionInfo, Tuple[float, float]]],
    Iterable[DimensionInfo],
]


def bounds_map(bounds: BoundsLike) -> dict[str, DimensionInfo]:
    """Normalize {id: DimensionInfo | (lower, upper)} or an iterable of infos."""
    if isinstance(bounds, Mapping):
        out = {}
        for key, val in bounds.items():
            if isinstance(val, DimensionInfo):
                out[key] = val
            else:
                lo, hi = val
                out[key] = DimensionInfo(key, float(lo), float(hi))
        return out
    return {d.id: d for d in bounds}


@dataclass(frozen=True)
class Cpz:
    c: np.ndarray
    G: np.ndarray
    E: np.ndarray
    A: np.ndarray
    b: np.ndarray
    R: np.ndarray
    dims: Tuple[str, ...]
    _fp: Optional[str] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        dims = tuple(str(d) for d in self.dims)
        if len(set(dims)) != len(dims):
            raise ValueError("dimension ids must be unique")
        n = len(dims)

        def to2d(name: str, x, dtype) -> np.ndarray:
            arr = np.asarray(x, dtype=dtype)
            if arr.ndim != 2:
                if arr.size == 0:
                    return np.zeros((0, 0), dtype=dtype)
                raise ValueError(f"{name} must be a 2-D matrix (or empty)")
            return arr

        c = np.asarray(self.c, dtype=float).reshape(n)
        G = to2d("G", self.G, float)
        E = to2d("E", self.E, np.int64)
        A = to2d("A", self.A, float)
        R = to2d("R", self.R, np.int64)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        # empty inputs inherit the sizes implied by their partners
        if G.size == 0:
            G = np.zeros((n, G.shape[1] if G.shape[1] else E.shape[1]))
        if E.size == 0:
            E = np.zeros((E.shape[0] or R.shape[0], G.shape[1]), dtype=np.int64)
        if A.size == 0:
            A = np.zeros((len(b), A.shape[1] if A.shape[1] else R.shape[1]))
        if R.size == 0:
            R = np.zeros((E.shape[0], A.shape[1]), dtype=np.int64)
        if G.shape[0] != n:
            raise ValueError(f"G has {G.shape[0]} rows, dims imply {n}")
        if E.shape[1] != G.shape[1]:
            raise ValueError("E and G must have matching column counts")
        if R.shape[1] != A.shape[1]:
            raise ValueError("R and A must have matching column counts")
        if R.shape[0] != E.shape[0]:
            raise ValueError("E and R must agree on the factor count")
        if A.shape[0] != b.shape[0]:
            raise ValueError("b length must equal A's row count")
        if np.any(E < 0) or np.any(R < 0):
            raise ValueError("exponents must be non-negative integers")
        c, G, E, A, b, R = (np.ascontiguousarray(x).copy() for x in (c, G, E, A, b, R))
        for arr in (c, G, E, A, b, R):
            arr.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "dims", dims)

    # size accessors mirror the tuple layout: n dims, ell generators with p
    # factors, m constraint rows over q constraint generators
    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def ell(self) -> int:
        return self.G.shape[1]

    @property
    def p(self) -> int:
        return self.E.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.A.shape[1]

    @property
    def fingerprint(self) -> str:
        """Content hash used as a cache key by the repair engine."""
        if self._fp is None:
            h = hashlib.sha1()
            h.update(" ".join(self.dims).encode())
            for arr in (self.c, self.G, self.E, self.A, self.b, self.R):
                h.update(np.ascontiguousarray(arr).tobytes())
            object.__setattr__(self, "_fp", h.hexdigest())
        return self._fp

    def interval_hull(self) -> Tuple[np.ndarray, np.ndarray]:
        """Outer box ignoring constraints: every |monomial| is at most 1."""
        radius = np.abs(self.G).sum(axis=1)
        return self.c - radius, self.c + radius


def _monomials(a: np.ndarray, Ex: np.ndarray) -> np.ndarray:
    """Monomial values for a batch: a (B,p), Ex (p,cols) -> (B,cols)."""
    B = a.shape[0]
    cols = Ex.shape[1]
    if cols == 0:
        return np.zeros((B, 0))
    if Ex.shape[0] == 0:
        return np.ones((B, cols))
    return np.prod(a[:, :, None] ** Ex[None, :, :], axis=1)


def _monomials_jac(a: np.ndarray, Ex: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Monomials plus d(monomial)/d(a_k), shapes (B,cols) and (B,cols,p)."""
    B, p = a.shape
    cols = Ex.shape[1]
    if cols == 0 or p == 0:
        return _monomials(a, Ex), np.zeros((B, cols, p))
    P = a[:, :, None] ** Ex[None, :, :]  # (B,p,cols)
    M = P.prod(axis=1)
    # leave-one-out products via prefix/suffix cumprods (no division: zeros ok)
    pref = np.ones_like(P)
    if p > 1:
        pref[:, 1:, :] = np.cumprod(P[:, :-1, :], axis=1)
    suf = np.ones_like(P)
    if p > 1:
        suf[:, :-1, :] = np.cumprod(P[:, :0:-1, :], axis=1)[:, ::-1, :]
    dP = Ex[None, :, :] * a[:, :, None] ** np.maximum(Ex - 1, 0)[None, :, :]
    dM = dP * pref * suf  # (B,p,cols)
    return M, dM.transpose(0, 2, 1)


def evaluate_point(S: Cpz, a: Sequence[float]) -> np.ndarray:
    """c + G * monomials(a); exact arithmetic, no feasibility check."""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    if a.shape[1] != S.p:
        raise ValueError(f"assignment length {a.shape[1]} != factor count {S.p}")
    return S.c + _monomials(a, S.E)[0] @ S.G.T


def constraint_residual(S: Cpz, a: Sequence[float]) -> float:
    """Infinity norm of A * monomials(a) - b; zero iff constraints hold."""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    if a.shape[1] != S.p:
        raise ValueError(f"assignment length {a.shape[1]} != factor count {S.p}")
    if S.m == 0:
        return 0.0
    return float(np.max(np.abs(_monomials(a, S.R)[0] @ S.A.T - S.b)))


def is_feasible_assignment(S: Cpz, a: Sequence[float], tol: float = FEASIBILITY_TOL) -> bool:
    arr = np.asarray(a, dtype=float)
    return bool(np.all(np.abs(arr) <= 1.0 + 1e-12) and constraint_residual(S, arr) <= tol)


# ---------------------------------------------------------------------------
# Point queries (membership / distance / depth)


def _point_residual_fn(S: Cpz, targets: np.ndarray, weight: float):
    """Residual closure for LM: rows [x(a)-target, w*(A mono - b)]."""
    G, E, A, R, b, c = S.G, S.E, S.A, S.R, S.b, S.c

    def fun(a: np.ndarray, rows: np.ndarray, need_jac: bool = True):
        if not need_jac:
            rx = (c + _monomials(a, E) @ G.T) - targets[rows]
            if S.m == 0:
                return rx, None
            rc = (_monomials(a, R) @ A.T - b) * weight
            return np.concatenate([rx, rc], axis=1), None
        M, dM = _monomials_jac(a, E)
        rx = (c + M @ G.T) - targets[rows]
        Jx = np.einsum("nl,blp->bnp", G, dM)
        if S.m == 0:
            return rx, Jx
        Mr, dMr = _monomials_jac(a, R)
        rc = (Mr @ A.T - b) * weight
        Jc = np.einsum("ml,blp->bmp", A, dMr) * weight
        return np.concatenate([rx, rc], axis=1), np.concatenate([Jx, Jc], axis=1)

    return fun


def _exact_metrics(S: Cpz, a: np.ndarray, targets: np.ndarray):
    """Unweighted per-row match error and constraint residual (inf norms)."""
    M = _monomials(a, S.E)
    x = S.c + M @ S.G.T
    dist_inf = np.max(np.abs(x - targets), axis=1) if S.n else np.zeros(a.shape[0])
    dist2 = np.einsum("bn,bn->b", x - targets, x - targets)
    if S.m == 0:
        resid = np.zeros(a.shape[0])
    else:
        resid = np.max(np.abs(_monomials(a, S.R) @ S.A.T - S.b), axis=1)
    return dist_inf, dist2, resid


POLISH_WEIGHT = 1e4  # second-phase penalty: pushes residuals well under tol


def _polish_rows(
    S: Cpz,
    a0: np.ndarray,
    targets: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    max_iters: int = 60,
):
    """Re-run LM at a stiff weight from warm starts; returns exact metrics."""
    res = lm_least_squares(
        _point_residual_fn(S, targets, POLISH_WEIGHT), a0, lb, ub,
        max_iters=max_iters,
    )
    dist_inf, dist2, resid = _exact_metrics(S, res.a, targets)
    return res.a, dist_inf, dist2, resid


def _wave_sizes(total: int) -> list[int]:
    sizes, first = [], min(4, total)
    sizes.append(first)
    left = total - first
    while left > 0:
        take = min(6, left)
        sizes.append(take)
        left -= take
    return sizes


def membership_batch(
    S: Cpz,
    points: np.ndarray,
    tol: float = MEMBERSHIP_TOL,
    options: NlpOptions = DEFAULT_OPTIONS,
    extra_starts: Optional[np.ndarray] = None,
    seeds: Optional[np.ndarray] = None,
    want_witness: bool = False,
):
    """Vectorized containment for many points against one set.

    Returns (inside, low_confidence) boolean arrays.  Restarts are spent in
    waves so points resolved early (a feasible match found) stop paying for
    the remaining starts; only a returned witness proves membership, so the
    `False` side is conservative by construction.

    `extra_starts` (k, p) prepends shared starts for every point; `seeds`
    (N, k, p) gives per-point warm starts (e.g. witnesses carried over from
    an operand set) tried in a cheap wave before the generic restarts.
    With `want_witness` a third (N, p) array holds a proving assignment per
    inside point (NaN rows elsewhere).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    N = points.shape[0]
    if points.shape[1] != S.n:
        raise ValueError(f"point length {points.shape[1]} != dims {S.n}")
    inside = np.zeros(N, bool)
    any_conv = np.zeros(N, bool)
    W = np.full((N, S.p), np.nan)

    def _result():
        low_conf = open_mask & ~inside & ~any_conv
        return (inside, low_conf, W) if want_witness else (inside, low_conf)

    lo, hi = S.interval_hull()
    open_mask = ~np.any((points < lo - tol) | (points > hi + tol), axis=1)
    if not open_mask.any():
        return _result()

    if S.p == 0:
        idx = np.flatnonzero(open_mask)
        a0 = np.zeros((idx.size, 0))
        dist_inf, _, resid = _exact_metrics(S, a0, points[idx])
        inside[idx] = (dist_inf <= tol) & (resid <= tol)
        any_conv[:] = True
        return _result()

    if seeds is not None:
        seeds = np.asarray(seeds, dtype=float)
        if seeds.ndim == 2:
            seeds = seeds[:, None, :]
        idx = np.flatnonzero(open_mask)
        k = seeds.shape[1]
        a0 = np.clip(seeds[idx].reshape(-1, S.p), -1.0, 1.0)
        rows = np.repeat(idx, k)
        res = lm_least_squares(
            _point_residual_fn(S, points[rows], options.penalty_weight),
            a0,
            -np.ones(S.p),
            np.ones(S.p),
            max_iters=options.max_iters,
            f_tol=0.25 * tol * tol,
            g_tol=options.g_tol,
            step_tol=options.step_tol,
        )
        dist_inf, _, resid = _exact_metrics(S, res.a, points[rows])
        hit = ((dist_inf <= tol) & (resid <= tol)).reshape(idx.size, k)
        conv = res.converged.reshape(idx.size, k)
        got = hit.any(axis=1)
        W[idx[got]] = res.a.reshape(idx.size, k, S.p)[got, hit[got].argmax(axis=1)]
        inside[idx] |= got
        any_conv[idx] |= conv.any(axis=1)

    starts = default_starts(S.p, options.restarts)
    if extra_starts is not None and extra_starts.size:
        starts = np.vstack([np.atleast_2d(extra_starts), starts])
    offset = 0
    for wave in _wave_sizes(starts.shape[0]):
        idx = np.flatnonzero(open_mask & ~inside)
        if idx.size == 0:
            break
        block = starts[offset : offset + wave]
        offset += wave
        a0 = np.tile(block, (idx.size, 1))
        targets = np.repeat(points[idx], wave, axis=0)
        res = lm_least_squares(
            _point_residual_fn(S, targets, options.penalty_weight),
            a0,
            -np.ones(S.p),
            np.ones(S.p),
            max_iters=options.max_iters,
            f_tol=0.25 * tol * tol,
            g_tol=options.g_tol,
            step_tol=options.step_tol,
        )
        dist_inf, _, resid = _exact_metrics(S, res.a, targets)
        hit = ((dist_inf <= tol) & (resid <= tol)).reshape(idx.size, wave)
        conv = res.converged.reshape(idx.size, wave)
        got = hit.any(axis=1)
        W[idx[got]] = res.a.reshape(idx.size, wave, S.p)[got, hit[got].argmax(axis=1)]
        inside[idx] |= got
        any_conv[idx] |= conv.any(axis=1)
    return _result()


def contains(
    S: Cpz,
    point: Sequence[float],
    tol: float = MEMBERSHIP_TOL,
    options: NlpOptions = DEFAULT_OPTIONS,
) -> bool:
    """True iff some box assignment matches `point` within tol and is feasible."""
    inside, _ = membership_batch(S, np.asarray(point, dtype=float)[None, :], tol, options)
    return bool(inside[0])


@dataclass
class PointQuery:
    inside: bool
    assignment: Optional[np.ndarray]
    dist2: float
    resid_inf: float
    low_confidence: bool


def contains_info(
    S: Cpz,
    point: Sequence[float],
    tol: float = MEMBERSHIP_TOL,
    options: NlpOptions = DEFAULT_OPTIONS,
    extra_starts: Optional[np.ndarray] = None,
) -> PointQuery:
    """Containment plus the best witness found (for forwarding/warm starts)."""
    point = np.asarray(point, dtype=float).reshape(1, -1)
    if S.p == 0:
        dist_inf, dist2, resid = _exact_metrics(S, np.zeros((1, 0)), point)
        ok = bool((dist_inf[0] <= tol) and (resid[0] <= tol))
        return PointQuery(ok, np.zeros(0), float(dist2[0]), float(resid[0]), False)
    starts = default_starts(S.p, options.restarts)
    if extra_starts is not None and extra_starts.size:
        starts = np.vstack([np.atleast_2d(extra_starts), starts])
    targets = np.repeat(point, starts.shape[0], axis=0)
    res = lm_least_squares(
        _point_residual_fn(S, targets, options.penalty_weight),
        starts,
        -np.ones(S.p),
        np.ones(S.p),
        max_iters=options.max_iters,
        f_tol=0.25 * tol * tol,
        g_tol=options.g_tol,
    )
    dist_inf, dist2, resid = _exact_metrics(S, res.a, targets)
    feas = resid <= tol
    ok = feas & (dist_inf <= tol)
    if ok.any():
        k = int(np.argmin(np.where(ok, dist2, np.inf)))
        return PointQuery(True, res.a[k], float(dist2[k]), float(resid[k]), False)
    k = int(np.argmin(dist2 + np.where(feas, 0.0, 1e9)))
    return PointQuery(
        False, res.a[k], float(dist2[k]), float(resid[k]), not bool(res.converged.any())
    )


def _slsqp_polish(S: Cpz, point: np.ndarray, a0: np.ndarray, lb: np.ndarray, ub: np.ndarray):
    """Tighten a near-solution to exact constraint feasibility."""

    def obj(a):
        M, dM = _monomials_jac(a[None, :], S.E)
        d = S.c + M[0] @ S.G.T - point
        grad = 2.0 * (S.G @ dM[0]).T @ d
        return float(d @ d), grad

    cons = []
    if S.m:
        def c_fun(a):
            return _monomials(a[None, :], S.R)[0] @ S.A.T - S.b

        def c_jac(a):
            _, dMr = _monomials_jac(a[None, :], S.R)
            return np.einsum("ml,lp->mp", S.A, dMr[0])

        cons.append({"type": "eq", "fun": c_fun, "jac": c_jac})
    try:
        out = sciopt.minimize(
            obj,
            a0,
            jac=True,
            bounds=list(zip(lb, ub)),
            constraints=cons,
            method="SLSQP",
            options={"maxiter": 80, "ftol": 1e-14},
        )
    except (ValueError, np.linalg.LinAlgError):
        return None
    a = np.clip(out.x, lb, ub)
    dist_inf, dist2, resid = _exact_metrics(S, a[None, :], point[None, :])
    return a, float(dist2[0]), float(resid[0])


@dataclass
class DistanceResult:
    value: float  # squared Euclidean distance
    assignment: Optional[np.ndarray]
    low_confidence: bool


def distance_info(
    S: Cpz,
    point: Sequence[float],
    options: NlpOptions = DEFAULT_OPTIONS,
    tol: float = FEASIBILITY_TOL,
    lb: Optional[np.ndarray] = None,
    ub: Optional[np.ndarray] = None,
    extra_starts: Optional[np.ndarray] = None,
) -> DistanceResult:
    """min ||x(a) - point||^2 over feasible a, via penalty LM + SLSQP polish.

    `lb`/`ub` override the factor box (used by boundary_depth to pin faces).
    """
    point = np.asarray(point, dtype=float).reshape(S.n)
    lb = -np.ones(S.p) if lb is None else np.asarray(lb, dtype=float)
    ub = np.ones(S.p) if ub is None else np.asarray(ub, dtype=float)
    if S.p == 0:
        dist_inf, dist2, resid = _exact_metrics(S, np.zeros((1, 0)), point[None, :])
        return DistanceResult(float(dist2[0]), np.zeros(0), bool(resid[0] > tol))
    starts = np.clip(default_starts(S.p, options.restarts), lb, ub)
    if extra_starts is not None and extra_starts.size:
        starts = np.vstack([np.clip(np.atleast_2d(extra_starts), lb, ub), starts])
    targets = np.repeat(point[None, :], starts.shape[0], axis=0)
    res = lm_least_squares(
        _point_residual_fn(S, targets, options.penalty_weight),
        starts,
        lb,
        ub,
        max_iters=options.max_iters,
        g_tol=options.g_tol,
    )
    dist_inf, dist2, resid = _exact_metrics(S, res.a, targets)
    order = np.argsort(dist2 + np.where(resid <= tol, 0.0, 1e6 + resid))
    if S.m == 0:
        k = order[0]
        return DistanceResult(float(dist2[k]), res.a[k], bool(resid[k] > tol))
    best: Optional[Tuple[np.ndarray, float]] = None
    for k in order[:2]:
        polished = _slsqp_polish(S, point, res.a[k], lb, ub)
        if polished is None:
            continue
        a, d2, rr = polished
        if rr <= tol and (best is None or d2 < best[1]):
            best = (a, d2)
    for k in order:  # a feasible unpolished row may still win
        if resid[k] <= tol and (best is None or dist2[k] < best[1]):
            best = (res.a[k], float(dist2[k]))
    if best is not None:
        return DistanceResult(best[1], best[0], False)
    k = order[0]  # nothing reached feasibility: report best penalty value
    return DistanceResult(float(dist2[k]), res.a[k], True)


def distance_to_set(
    S: Cpz,
    point: Sequence[float],
    options: NlpOptions = DEFAULT_OPTIONS,
) -> float:
    """Squared distance from `point` to the set (0 within tol for members)."""
    return distance_info(S, point, options).value


def distance_batch(
    S: Cpz,
    points: np.ndarray,
    options: NlpOptions = DEFAULT_OPTIONS,
    tol: float = FEASIBILITY_TOL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Squared set distances for many points in two batched LM passes.

    Trades the polish of distance_info for throughput; relative accuracy is
    roughly 1e-3, plenty for optimization-loop scoring.  Returns (d2, ok)
    where ok=False marks points whose solves never reached feasibility.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    K = points.shape[0]
    if K == 0:
        return np.zeros(0), np.zeros(0, bool)
    if S.p == 0:
        _, d2, rr = _exact_metrics(S, np.zeros((K, 0)), points)
        return d2, rr <= tol
    R = options.restarts
    starts = np.tile(default_starts(S.p, R), (K, 1))
    targets = np.repeat(points, R, axis=0)
    lb, ub = -np.ones(S.p), np.ones(S.p)
    res = lm_least_squares(
        _point_residual_fn(S, targets, options.penalty_weight),
        starts, lb, ub, max_iters=options.max_iters,
    )
    _, dist2, resid = _exact_metrics(S, res.a, targets)
    score = (dist2 + np.where(resid <= tol, 0.0, 1e6 + resid)).reshape(K, R)
    if S.m == 0:
        k = score.argmin(axis=1)
        return dist2.reshape(K, R)[np.arange(K), k], np.ones(K, bool)
    order = np.argsort(score, axis=1)[:, :2]  # two best rows per point
    rows = (np.arange(K)[:, None] * R + order).ravel()
    pa, _, pd2, prr = _polish_rows(S, res.a[rows], targets[rows], lb, ub)
    cd2 = np.concatenate([pd2.reshape(K, 2), dist2.reshape(K, R)], axis=1)
    crr = np.concatenate([prr.reshape(K, 2), resid.reshape(K, R)], axis=1)
    feas = crr <= tol
    ranked = np.where(feas, cd2, np.inf)
    best = ranked.min(axis=1)
    ok = feas.any(axis=1)
    fallback = cd2.min(axis=1)
    return np.where(ok, best, fallback), ok


def boundary_depth(
    S: Cpz,
    point: Sequence[float],
    options: NlpOptions = DEFAULT_OPTIONS,
    tol: float = FEASIBILITY_TOL,
) -> float:
    """Approximate squared distance from an interior point to the boundary.

    Factor-face scheme: minimum over every factor pinned to -1 or +1 of the
    constrained match distance.  Exact only when the nearest boundary patch is
    the image of a factor-box face; a set whose faces are all infeasible (or
    with p = 0) has empty interior, so the depth is reported as 0.
    """
    point = np.asarray(point, dtype=float).reshape(S.n)
    if S.p == 0:
        return 0.0
    faces = [(k, s) for k in range(S.p) for s in (-1.0, 1.0)]
    count = max(4, options.restarts // 2)
    starts = default_starts(S.p, count)
    a0, lbs, ubs, targets = [], [], [], []
    for (k, s) in faces:
        lb = -np.ones(S.p)
        ub = np.ones(S.p)
        lb[k] = ub[k] = s
        block = np.clip(starts, lb, ub)
        a0.append(block)
        lbs.append(np.tile(lb, (count, 1)))
        ubs.append(np.tile(ub, (count, 1)))
    a0 = np.vstack(a0)
    lbs = np.vstack(lbs)
    ubs = np.vstack(ubs)
    targets = np.repeat(point[None, :], a0.shape[0], axis=0)
    res = lm_least_squares(
        _point_residual_fn(S, targets, options.penalty_weight),
        a0,
        lbs,
        ubs,
        max_iters=options.max_iters,
        g_tol=options.g_tol,
    )
    _, dist2, resid = _exact_metrics(S, res.a, targets)
    per_face = (dist2 + np.where(resid <= tol, 0.0, 1e6 + resid)).reshape(len(faces), count)
    face_best = per_face.min(axis=1)
    # A face whose image passes through the point itself carries no boundary
    # information (the point's own witness sits on it); depth is the nearest
    # face that the point is NOT on.  All faces degenerate means empty
    # interior: report 0.
    zero_cut = tol * tol
    if S.m == 0:
        positive = face_best[face_best > zero_cut]
        return float(positive.min()) if positive.size else 0.0
    cand = [fi for fi in np.argsort(face_best) if face_best[fi] > zero_cut][:3]
    if not cand:
        return 0.0
    rows, plbs, pubs = [], [], []
    for fi in cand:
        k, s = faces[fi]
        lb = -np.ones(S.p)
        ub = np.ones(S.p)
        lb[k] = ub[k] = s
        rows.append(fi * count + int(np.argmin(per_face[fi])))
        plbs.append(lb)
        pubs.append(ub)
    pa, _, pd2, prr = _polish_rows(
        S, res.a[rows], targets[: len(rows)], np.vstack(plbs), np.vstack(pubs)
    )
    ok = (prr <= tol) & (pd2 > zero_cut)
    vals = pd2[ok]
    # phase-1 estimate backs up a polish that walked away; 1e6+ marks faces
    # that never reached feasibility and is never a reportable depth
    fallback = float(face_best[cand[0]])
    have_fallback = fallback < 1e6
    if vals.size:
        best = float(vals.min())
        return min(best, fallback) if have_fallback else best
    return fallback if have_fallback else 0.0


# ---------------------------------------------------------------------------
# Set constructions


def _check_same_dims(S1: Cpz, S2: Cpz) -> None:
    if S1.dims != S2.dims:
        raise ValueError(f"dimension mismatch: {S1.dims} vs {S2.dims} (unify first)")


def intersect(S1: Cpz, S2: Cpz) -> Cpz:
    """Exact intersection over a shared dimension ordering.

    Keeps S1's generator side; the factor space becomes the disjoint union,
    and three constraint blocks are stacked: S1's own, S2's own, and n rows
    forcing both generator sums to land on the same point (G1-terms minus
    G2-terms equals c2 - c1).
    """
    _check_same_dims(S1, S2)
    n = S1.n
    p1, p2 = S1.p, S2.p
    l1, l2 = S1.ell, S2.ell
    q1, q2 = S1.q, S2.q
    m1, m2 = S1.m, S2.m
    E = np.vstack([S1.E, np.zeros((p2, l1), dtype=np.int64)])
    qq = q1 + q2 + l1 + l2
    A = np.zeros((m1 + m2 + n, qq))
    A[:m1, :q1] = S1.A
    A[m1 : m1 + m2, q1 : q1 + q2] = S2.A
    A[m1 + m2 :, q1 + q2 : q1 + q2 + l1] = S1.G
    A[m1 + m2 :, q1 + q2 + l1 :] = -S2.G
    R = np.zeros((p1 + p2, qq), dtype=np.int64)
    R[:p1, :q1] = S1.R
    R[p1:, q1 : q1 + q2] = S2.R
    R[:p1, q1 + q2 : q1 + q2 + l1] = S1.E
    R[p1:, q1 + q2 + l1 :] = S2.E
    b = np.concatenate([S1.b, S2.b, S2.c - S1.c])
    return Cpz(S1.c, S1.G, E, A, b, R, S1.dims)


def union(S1: Cpz, S2: Cpz) -> Cpz:
    """Exact union via a selector factor lam with lam^2 = 1.

    Points are (1+lam)/2 * S1-point + (1-lam)/2 * S2-point expanded into
    polynomial generators; each operand's constraint block is gated by its
    selector half so the inactive branch's factors roam free.  Grows the
    representation quickly, which is why formulas keep disjuncts as covers.
    """
    _check_same_dims(S1, S2)
    n = S1.n
    p1, p2 = S1.p, S2.p
    l1, l2 = S1.ell, S2.ell
    q1, q2 = S1.q, S2.q
    m1, m2 = S1.m, S2.m
    p = p1 + p2 + 1  # selector factor appended last

    def lift(Ex: np.ndarray, row0: int, lam: int) -> np.ndarray:
        out = np.zeros((p, Ex.shape[1]), dtype=np.int64)
        out[row0 : row0 + Ex.shape[0], :] = Ex
        out[-1, :] = lam
        return out

    c = 0.5 * (S1.c + S2.c)
    G = np.hstack(
        [
            (0.5 * (S1.c - S2.c))[:, None],
            0.5 * S1.G,
            0.5 * S1.G,
            0.5 * S2.G,
            -0.5 * S2.G,
        ]
    )
    e_lam = np.zeros((p, 1), dtype=np.int64)
    e_lam[-1, 0] = 1
    E = np.hstack(
        [e_lam, lift(S1.E, 0, 0), lift(S1.E, 0, 1), lift(S2.E, p1, 0), lift(S2.E, p1, 1)]
    )

    a_cols, r_cols, b_rows = [], [], []
    mrows = m1 + m2 + 1

    def col(vals_rows: np.ndarray, at: int, expo: np.ndarray) -> None:
        block = np.zeros((mrows, vals_rows.shape[1]))
        block[at : at + vals_rows.shape[0], :] = vals_rows
        a_cols.append(block)
        r_cols.append(expo)

    if m1:
        col(0.5 * S1.A, 0, lift(S1.R, 0, 0))
        col(0.5 * S1.A, 0, lift(S1.R, 0, 1))
        col((-0.5 * S1.b)[:, None], 0, e_lam)
        b_rows.append(0.5 * S1.b)
    if m2:
        col(0.5 * S2.A, m1, lift(S2.R, p1, 0))
        col(-0.5 * S2.A, m1, lift(S2.R, p1, 1))
        col((0.5 * S2.b)[:, None], m1, e_lam)
        b_rows.append(0.5 * S2.b)
    lam_sq = np.zeros((mrows, 1))
    lam_sq[-1, 0] = 1.0
    a_cols.append(lam_sq)
    r_cols.append(2 * e_lam)
    b = np.concatenate(b_rows + [np.ones(1)]) if b_rows else np.ones(1)

    A = np.hstack(a_cols)
    R = np.hstack(r_cols)
    return Cpz(c, G, E, A, b, R, S1.dims)


def project(S: Cpz, keep: Sequence[str]) -> Cpz:
    """Row-select dimensions; factors and constraints are untouched."""
    keep = tuple(keep)
    missing = [d for d in keep if d not in S.dims]
    if missing:
        raise ValueError(f"unknown dimension ids: {missing}")
    idx = [S.dims.index(d) for d in keep]
    return Cpz(S.c[list(idx)], S.G[list(idx), :], S.E, S.A, S.b, S.R, keep)


def embed(S: Cpz, target_dims: Sequence[str], bounds: BoundsLike) -> Cpz:
    """Lift S into a larger ordered dim set, spanning missing dims fully.

    Each missing dimension gets one fresh factor with a linear generator of
    half its extent around its midpoint, so membership in the result is
    membership in S on S's dims and anywhere-in-bounds on the rest.
    """
    target = tuple(target_dims)
    bmap = bounds_map(bounds)
    if not set(S.dims) <= set(target):
        raise ValueError("target dims must contain the set's dims")
    missing = [d for d in target if d not in S.dims]
    for d in missing:
        if d not in bmap:
            raise ValueError(f"missing bounds for dimension {d}")
    n2 = len(target)
    k = len(missing)
    own_rows = [target.index(d) for d in S.dims]
    new_rows = [target.index(d) for d in missing]
    c = np.zeros(n2)
    c[own_rows] = S.c
    c[new_rows] = [bmap[d].midpoint for d in missing]
    G = np.zeros((n2, k + S.ell))
    for j, d in enumerate(missing):
        G[target.index(d), j] = 0.5 * bmap[d].extent
    G[own_rows, k:] = S.G
    E = np.zeros((S.p + k, k + S.ell), dtype=np.int64)
    E[: S.p, k:] = S.E
    E[S.p :, :k] = np.eye(k, dtype=np.int64)
    R = np.vstack([S.R, np.zeros((k, S.q), dtype=np.int64)])
    return Cpz(c, G, E, S.A, S.b, R, target)


def unify(S1: Cpz, S2: Cpz, bounds: BoundsLike) -> Tuple[Cpz, Cpz]:
    """Rebuild both sets over the ordered union (D1-only, shared, D2-only)."""
    set2 = set(S2.dims)
    set1 = set(S1.dims)
    only1 = [d for d in S1.dims if d not in set2]
    shared = [d for d in S1.dims if d in set2]
    only2 = [d for d in S2.dims if d not in set1]
    dprime = (*only1, *shared, *only2)
    return embed(S1, dprime, bounds), embed(S2, dprime, bounds)


def compact(S: Cpz) -> Cpz:
    """Drop zero generator/constraint columns and factors used nowhere."""
    gcols = np.flatnonzero(np.any(S.G != 0.0, axis=0)) if S.ell else np.zeros(0, int)
    acols = np.flatnonzero(np.any(S.A != 0.0, axis=0)) if S.q else np.zeros(0, int)
    G, E = S.G[:, gcols], S.E[:, gcols]
    A, R = S.A[:, acols], S.R[:, acols]
    used = np.zeros(S.p, bool)
    if E.shape[1]:
        used |= np.any(E != 0, axis=1)
    if R.shape[1]:
        used |= np.any(R != 0, axis=1)
    rows = np.flatnonzero(used)
    return Cpz(S.c, G, E[rows], A, S.b, R[rows], S.dims)


# ---------------------------------------------------------------------------
# Sampling and emptiness


def _feasibility_fn(S: Cpz):
    A, R, b = S.A, S.R, S.b

    def fun(a: np.ndarray, rows: np.ndarray, need_jac: bool = True):
        if not need_jac:
            return _monomials(a, R) @ A.T - b, None
        Mr, dMr = _monomials_jac(a, R)
        return Mr @ A.T - b, np.einsum("ml,blp->bmp", A, dMr)

    return fun


def sample_assignment(
    S: Cpz,
    rng: np.random.Generator,
    max_restarts: int = 64,
    tol: float = FEASIBILITY_TOL,
    options: NlpOptions = DEFAULT_OPTIONS,
) -> Optional[np.ndarray]:
    """A feasible factor assignment, or None when none is found in budget.

    Two-phase search. Full least-squares projection from uniform starts drags
    iterates onto box corners, so the feasible-set samples it returns pile up
    on the set's boundary. Phase one therefore pins p-m coordinates at their
    uniform draw (per row, random subsets) and solves only for the remaining
    m, which leaves interior mass intact; phase two falls back to the
    unrestricted solve so hard-to-satisfy systems keep their full budget.
    """
    if S.p == 0:
        return np.zeros(0) if constraint_residual(S, np.zeros(0)) <= tol else None
    if S.m == 0:
        return rng.uniform(-1.0, 1.0, S.p)

    def attempt(take: int, pin: bool) -> Optional[np.ndarray]:
        rows = _feasible_rows(S, rng, take, pin, tol, options)
        if len(rows):
            return rows[int(rng.integers(len(rows)))]
        return None

    chunk = 16
    for pin in (True, False) if S.m < S.p else (False,):
        drawn = 0
        budget = max_restarts if S.m >= S.p else (
            max_restarts // 2 if not pin else max_restarts - max_restarts // 2)
        while drawn < budget:
            take = min(chunk, budget - drawn)
            drawn += take
            a = attempt(take, pin)
            if a is not None:
                return a
    return None


def _feasible_rows(S: Cpz, rng: np.random.Generator, take: int, pin: bool,
                   tol: float, options: NlpOptions) -> np.ndarray:
    a0 = rng.uniform(-1.0, 1.0, (take, S.p))
    lb = -np.ones((take, S.p))
    ub = np.ones((take, S.p))
    if pin:
        for i in range(take):
            keep = rng.permutation(S.p)[:S.m]
            mask = np.ones(S.p, bool)
            mask[keep] = False
            lb[i, mask] = ub[i, mask] = a0[i, mask]
    res = lm_least_squares(
        _feasibility_fn(S),
        a0,
        lb,
        ub,
        max_iters=options.max_iters,
        f_tol=0.25 * tol * tol,
        g_tol=options.g_tol,
    )
    resid = np.max(np.abs(_monomials(res.a, S.R) @ S.A.T - S.b), axis=1)
    return res.a[resid <= tol]


def sample_points(
    S: Cpz,
    rng: np.random.Generator,
    k: int,
    max_restarts: int = 64,
    tol: float = FEASIBILITY_TOL,
    options: NlpOptions = DEFAULT_OPTIONS,
) -> np.ndarray:
    """Up to k feasible points as rows; empty when the budget finds none.

    Rejection-sampling callers test many candidates against the same set, and
    one batched solve amortizes far better than repeated sample_point calls.
    Same two-phase scheme as sample_assignment.
    """
    if S.p == 0:
        if constraint_residual(S, np.zeros(0)) <= tol:
            return np.repeat(evaluate_point(S, np.zeros(0))[None, :], k, axis=0)
        return np.zeros((0, S.n))
    if S.m == 0:
        a = rng.uniform(-1.0, 1.0, (k, S.p))
        return _monomials(a, S.E) @ S.G.T + S.c

    rows: list = []
    got = 0
    for pin in (True, False) if S.m < S.p else (False,):
        drawn = 0
        budget = max_restarts if S.m >= S.p else (
            max_restarts // 2 if not pin else max_restarts - max_restarts // 2)
        while drawn < budget and got < k:
            take = min(16, budget - drawn)
            drawn += take
            a = _feasible_rows(S, rng, take, pin, tol, options)
            if len(a):
                rows.append(a[: k - got])
                got += len(rows[-1])
        if got >= k:
            break
    if not rows:
        return np.zeros((0, S.n))
    a = np.vstack(rows)
    return _monomials(a, S.E) @ S.G.T + S.c


def sample_point(
    S: Cpz,
    rng: np.random.Generator,
    max_restarts: int = 64,
    tol: float = FEASIBILITY_TOL,
) -> Optional[np.ndarray]:
    """Evaluate a feasible assignment; None signals Infeasible (not a proof)."""
    a = sample_assignment(S, rng, max_restarts, tol)
    if a is None:
        return None
    return evaluate_point(S, a)


def is_empty(S: Cpz, budget: int = 64, tol: float = FEASIBILITY_TOL) -> bool:
    """True when no start reaches feasibility; conservative, not a decision."""
    if S.m == 0:
        return False
    rng = np.random.default_rng(0xE3A17 + 13 * S.p)  # deterministic verdicts
    return sample_assignment(S, rng, max_restarts=budget, tol=tol) is None


# ---------------------------------------------------------------------------
# Text serialization (snapshot format; floats round-trip via repr)


def _fmt(x: float) -> str:
    return repr(float(x))


def to_text(S: Cpz) -> str:
    lines = ["cpz", "dims " + " ".join(S.dims)]
    lines.append("c " + " ".join(_fmt(v) for v in S.c))

    def mat(name: str, M: np.ndarray, fmt) -> None:
        lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
        if M.shape[1] == 0:
            return  # shape header says it all; blank rows would not survive
        for row in M:
            lines.append(" ".join(fmt(v) for v in row))

    mat("G", S.G, _fmt)
    mat("E", S.E, lambda v: str(int(v)))
    mat("A", S.A, _fmt)
    lines.append("b " + " ".join(_fmt(v) for v in S.b))
    mat("R", S.R, lambda v: str(int(v)))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> Cpz:
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if not lines or lines[0] != "cpz":
        raise ValueError("not a cpz record (missing 'cpz' header)")
    pos = 1

    def take(prefix: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix + " ") and lines[pos] != prefix:
            raise ValueError(f"expected '{prefix}' at line {pos + 1}")
        toks = lines[pos].split()[1:]
        pos += 1
        return toks

    def mat(prefix: str, dtype) -> np.ndarray:
        nonlocal pos
        rows, cols = (int(t) for t in take(prefix))
        out = np.zeros((rows, cols), dtype=dtype)
        if cols == 0:
            return out
        for i in range(rows):
            if pos >= len(lines):
                raise ValueError(f"{prefix} matrix is missing row {i}")
            vals = lines[pos].split()
            if len(vals) != cols:
                raise ValueError(f"row {i} of {prefix} has {len(vals)} values, wanted {cols}")
            out[i] = [dtype(v) for v in vals]
            pos += 1
        return out

    dims = tuple(take("dims"))
    c = [float(v) for v in take("c")]
    G = mat("G", float)
    E = mat("E", int)
    A = mat("A", float)
    b = [float(v) for v in take("b")]
    R = mat("R", int)
    return Cpz(c, G, E, A, b, R, dims)
