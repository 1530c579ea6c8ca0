"""Start-state sampling for the observe-repair loop.

naive_sample draws directly from a formula's region; ActiveSampler biases
draws toward the symmetric difference of the pre- and post-repair formulas
so each new observation is likely to discriminate between them.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cpz import Cpz, DimensionInfo, sample_point, sample_points
from .predicates import (Formula, PredicateTemplate, atom_margin,
                         formula_region, wrap_angle)
from .repair import bind_formula
from .states import State, StateSpace, decode, encode


# region samples sit on set boundaries up to solver tolerance; a candidate
# only counts as outside the other formula beyond this band
REJECTION_BAND = 1e-6


@dataclass
class SamplerConfig:
    p_naive: float = 0.1
    max_rejections: int = 100
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_naive <= 1.0:
            raise ValueError(f"p_naive must be in [0, 1], got {self.p_naive}")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be at least 1")


@dataclass
class SampleDiagnostics:
    naive_mode: int = 0    # calls routed to the naive branch by p_naive
    difference: int = 0    # accepted difference-mode samples
    rejections: int = 0    # difference-mode candidates that satisfied both/neither
    fallbacks: int = 0     # rejection budgets exhausted, served naively instead
    infeasible: int = 0    # region sampling failed; uniform state returned


def sample_theta(space: StateSpace, params: Sequence[str],
                 rng: np.random.Generator) -> Dict[str, str]:
    """Uniform object choice per formal parameter."""
    names = space.object_names
    return {p: names[int(rng.integers(len(names)))] for p in params}


def _uniform_state(space: StateSpace, bounds: Optional[Mapping[str, DimensionInfo]],
                   rng: np.random.Generator) -> State:
    merged = space.bounds()
    if bounds:
        merged = {**merged, **bounds}
    lo = np.array([merged[d.id].lower for d in space.dims])
    hi = np.array([merged[d.id].upper for d in space.dims])
    # symbol dims span [-0.5, m-0.5]; uniform draws decode to uniform codes
    return decode(space, rng.uniform(lo, hi))


def _impose(space: StateSpace, base: State, dims: Sequence[str],
            x: np.ndarray) -> State:
    """Overwrite the constrained coordinates of base with a region sample."""
    vec = encode(space, base)
    bound = space.bounds()
    assigned = set()
    rolldiffs = []
    for did, v in zip(dims, x):
        if did.startswith("rolldiff."):
            _, manip, obj = did.split(".", 2)
            rolldiffs.append((manip, obj, float(v)))
            continue
        b = bound[did]
        vec[space.index(did)] = min(max(float(v), b.lower), b.upper)
        assigned.add(did)
    for manip, obj, v in rolldiffs:
        mid, oid = f"{manip}.roll", f"{obj}.roll"
        if mid in assigned:
            # manipulator roll already pinned: realize on the object instead
            vec[space.index(oid)] = wrap_angle(vec[space.index(mid)] - v)
        else:
            vec[space.index(mid)] = wrap_angle(vec[space.index(oid)] + v)
            assigned.add(mid)
    return decode(space, vec)


# templates whose region construction ignores the context state, and the
# object-parameter names whose context pose feeds the region otherwise
_CTX_FREE_TEMPLATES = frozenset({"roll", "symbol", "empty"})
_CTX_OBJECT_PARAMS = {"dist": ("obj",)}


def _cover_reusable(g: Formula, space: StateSpace,
                    bounds: Optional[Mapping[str, DimensionInfo]]) -> bool:
    """True when g's region is the same for every context state: each atom
    either never reads the context or reads only objects pinned by bounds."""
    for conj in g.disjuncts:
        for atom in conj:
            if atom.template in _CTX_FREE_TEMPLATES:
                continue
            readers = _CTX_OBJECT_PARAMS.get(atom.template)
            if readers is None:
                return False
            for pname in readers:
                name = atom.value(pname)
                dims = space.object_dims.get(name)
                if dims is None or bounds is None:
                    return False
                for d in dims:
                    pin = bounds.get(d.id)
                    if pin is None or pin.upper - pin.lower > 1e-6:
                        return False
    return True


class _CoverCache:
    """formula_region output per bound formula, when context-independent."""

    def __init__(self, space: StateSpace,
                 bounds: Optional[Mapping[str, DimensionInfo]],
                 registry: Optional[Dict[str, PredicateTemplate]]):
        self.space = space
        self.bounds = bounds
        self.registry = registry
        self._store: Dict[Formula, List[Cpz]] = {}

    def cover(self, g: Formula, ctx: State) -> List[Cpz]:
        hit = self._store.get(g)
        if hit is not None:
            return hit
        cover = formula_region(g, ctx, self.space, self.bounds, self.registry)
        if self.registry is None and _cover_reusable(g, self.space, self.bounds):
            if len(self._store) > 64:
                self._store.clear()
            self._store[g] = cover
        return cover


def naive_sample(f: Formula, space: StateSpace,
                 bounds: Optional[Mapping[str, DimensionInfo]] = None,
                 rng: Optional[np.random.Generator] = None,
                 params: Sequence[str] = (),
                 diag: Optional[SampleDiagnostics] = None,
                 registry: Optional[Dict[str, PredicateTemplate]] = None,
                 cache: Optional[_CoverCache] = None,
                 ) -> Tuple[State, Dict[str, str]]:
    """A state drawn from f's region, remaining dimensions uniform."""
    rng = np.random.default_rng() if rng is None else rng
    diag = SampleDiagnostics() if diag is None else diag
    theta = sample_theta(space, params, rng)
    g = bind_formula(f, theta, registry)
    base = _uniform_state(space, bounds, rng)
    try:
        if cache is not None:
            cover = cache.cover(g, base)
        else:
            cover = formula_region(g, base, space, bounds, registry)
    except KeyError:
        diag.infeasible += 1
        return base, theta
    k = int(rng.integers(len(cover)))
    x = sample_point(cover[k], rng)
    if x is None:
        diag.infeasible += 1
        return base, theta
    return _impose(space, base, cover[k].dims, x), theta


def _margin_true(f: Formula, state: State, space: StateSpace,
                 registry: Optional[Dict[str, PredicateTemplate]],
                 band: float = 0.0) -> bool:
    return any(
        all(atom_margin(a, state, space, registry, ctx=state) <= band for a in conj)
        for conj in f.disjuncts)


class ActiveSampler:
    """Per-session sampler; holds the direction toggle and RNG stream."""

    def __init__(self, space: StateSpace, cfg: Optional[SamplerConfig] = None,
                 bounds: Optional[Mapping[str, DimensionInfo]] = None,
                 rng: Optional[np.random.Generator] = None,
                 registry: Optional[Dict[str, PredicateTemplate]] = None):
        self.space = space
        self.cfg = cfg if cfg is not None else SamplerConfig()
        self.bounds = bounds
        self.rng = np.random.default_rng(self.cfg.seed) if rng is None else rng
        self.registry = registry
        self.diag = SampleDiagnostics()
        self._from_new = False
        self._cache = _CoverCache(space, bounds, registry)

    def naive(self, f: Formula, params: Sequence[str] = ()
              ) -> Tuple[State, Dict[str, str]]:
        return naive_sample(f, self.space, self.bounds, self.rng, params,
                            self.diag, self.registry, self._cache)

    def sample(self, f_old: Formula, f_new: Formula,
               params: Sequence[str] = ()) -> Tuple[State, Dict[str, str]]:
        rng = self.rng
        if rng.random() < self.cfg.p_naive:
            self.diag.naive_mode += 1
            return self.naive(f_new, params)
        self._from_new = not self._from_new
        src, other = (f_new, f_old) if self._from_new else (f_old, f_new)
        attempts = 0
        while attempts < self.cfg.max_rejections:
            theta = sample_theta(self.space, params, rng)
            g_src = bind_formula(src, theta, self.registry)
            g_other = bind_formula(other, theta, self.registry)
            base = _uniform_state(self.space, self.bounds, rng)
            try:
                cover = self._cache.cover(g_src, base)
            except KeyError:
                break
            k = int(rng.integers(len(cover)))
            # candidates from one region batch amortize the solver call; they
            # share theta and base, which rejection outcomes do not depend on
            batch = min(16, self.cfg.max_rejections - attempts)
            pts = sample_points(cover[k], rng, batch)
            if not len(pts):
                self.diag.infeasible += 1
                attempts += 1
                continue
            for x in pts:
                attempts += 1
                state = _impose(self.space, base, cover[k].dims, x)
                if not _margin_true(g_other, state, self.space, self.registry,
                                    band=REJECTION_BAND):
                    self.diag.difference += 1
                    return state, theta
                self.diag.rejections += 1
        self.diag.fallbacks += 1
        return self.naive(f_new, params)


def active_sample(f_old: Formula, f_new: Formula, space: StateSpace,
                  bounds: Optional[Mapping[str, DimensionInfo]] = None,
                  cfg: Optional[SamplerConfig] = None,
                  rng: Optional[np.random.Generator] = None,
                  params: Sequence[str] = (),
                  ) -> Tuple[State, Dict[str, str]]:
    """One-shot convenience wrapper; loops should hold an ActiveSampler."""
    return ActiveSampler(space, cfg, bounds, rng).sample(f_old, f_new, params)
