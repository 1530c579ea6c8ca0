"""Observation classification, formula error, and the anytime edit search.

The error of a formula against labeled observations is the sum of squared
set distances of misclassified points. Distances decompose per conjunct:
when a conjunct's atoms occupy pairwise-disjoint constraint dimensions the
joint set is a product and the distance splits into closed-form per-atom
terms; otherwise the joint region is composed and measured numerically.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize

from .cpz import DimensionInfo, boundary_depth, distance_info, is_empty
from .predicates import (
    Atom,
    Formula,
    FormulaSyntaxError,
    PredicateTemplate,
    _read_sexpr,
    _tokenize,
    atom_site_key,
    eval_formula,
    formula_bounds,
    formula_region,
    make_atom,
    parse_formula,
    print_formula,
    resolve_template,
)
from .states import State, StateSpace, state_from_record, state_to_record

GEOMETRY_EQ_TOL = 1e-9
ZERO_ERROR = 1e-12

NEW_DISJUNCT = -1


class RepairLabel(Enum):
    SHOULD_EXCLUDE = "should_exclude"
    SHOULD_INCLUDE = "should_include"


@dataclass(frozen=True)
class ActionModel:
    """A named controller abstraction: constraint and effect formulas over
    formal parameter names bound per-invocation by an observation's theta."""

    name: str
    param_names: Tuple[str, ...]
    constraint: Formula
    effect: Formula


@dataclass(frozen=True, eq=False)
class Observation:
    action: str
    q: State
    theta: Mapping[str, str]
    q_prime: State
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", dict(self.theta))


@dataclass(frozen=True)
class Edit:
    op: str  # "param" | "remove" | "add" | "replace"
    disjunct: int  # NEW_DISJUNCT marks a fresh top-level disjunct
    atom: Optional[int] = None
    payload: Optional[Atom] = None


class InvalidEdit(Exception):
    """The edit cannot apply to its base formula (e.g. it would empty it)."""


# ---------------------------------------------------------------------------
# classification


def states_equal(space: StateSpace, a: State, b: State, tol: float = GEOMETRY_EQ_TOL) -> bool:
    """Geometry within per-dimension tolerance, symbols exactly equal."""
    if a.q_s != b.q_s or set(a.q_o) != set(b.q_o):
        return False
    if any(abs(x - y) > tol for x, y in zip(a.q_r, b.q_r)):
        return False
    return all(
        abs(x - y) <= tol
        for name in a.q_o
        for x, y in zip(a.q_o[name], b.q_o[name])
    )


def bind_atom(atom: Atom, binding: Mapping[str, str],
              registry: Optional[Dict[str, PredicateTemplate]] = None) -> Atom:
    """Resolve formal reference parameters through an observation's theta."""
    t = resolve_template(atom.template, registry)
    changes = {
        ps.name: binding[atom.value(ps.name)]
        for ps in t.param_spec
        if ps.is_ref and atom.value(ps.name) in binding
    }
    return atom.rebind(**changes) if changes else atom


def bind_formula(f: Formula, binding: Mapping[str, str],
                 registry: Optional[Dict[str, PredicateTemplate]] = None) -> Formula:
    if not binding:
        return f
    return Formula(tuple(
        tuple(bind_atom(a, binding, registry) for a in conj)
        for conj in f.disjuncts
    ))


def unexpected(model: ActionModel, h: Observation, space: StateSpace,
               registry: Optional[Dict[str, PredicateTemplate]] = None) -> bool:
    """An observation surprises the model when the controller idled although
    the constraint held, or acted although it did not, or left the effect set."""
    if h.action != model.name:
        raise ValueError(f"observation of {h.action!r} checked against model {model.name!r}")
    phi = bind_formula(model.constraint, h.theta, registry)
    phi_true = eval_formula(phi, h.q, space, registry)
    if states_equal(space, h.q, h.q_prime):
        return phi_true
    if not phi_true:
        return True
    psi = bind_formula(model.effect, h.theta, registry)
    return not eval_formula(psi, h.q_prime, space, registry, ctx=h.q)


# ---------------------------------------------------------------------------
# the error function


@dataclass(frozen=True, eq=False)
class LabeledPoint:
    """One state a formula must include or exclude, with its resolution context."""

    state: State
    ctx: State
    binding: Mapping[str, str]
    must_include: bool


def label_points(obs: Sequence[Observation], label: RepairLabel,
                 space: StateSpace) -> List[LabeledPoint]:
    """Constraint repairs judge start states (include iff the controller acted);
    effect repairs judge outcome states of the observations where it acted."""
    points = []
    for h in obs:
        acted = not states_equal(space, h.q, h.q_prime)
        if label is RepairLabel.SHOULD_EXCLUDE:
            points.append(LabeledPoint(h.q, h.q, h.theta, must_include=acted))
        elif acted:
            points.append(LabeledPoint(h.q_prime, h.q, h.theta, must_include=True))
    return points


class ErrorComputer:
    """Evaluates formula error over labeled points, caching solver results.

    One instance serves a whole repair session; candidate formulas share
    conjuncts and contexts, so region distances repeat heavily.
    """

    def __init__(self, space: StateSpace,
                 bounds: Optional[Mapping[str, DimensionInfo]] = None,
                 registry: Optional[Dict[str, PredicateTemplate]] = None):
        self.space = space
        self.bounds = dict(bounds) if bounds else None
        self.registry = registry
        self.low_confidence = 0
        self._regions: Dict[Any, Any] = {}
        self._distances: Dict[Any, float] = {}

    # -- per-conjunct geometry

    def _atom_margin(self, atom: Atom, pt: LabeledPoint) -> float:
        t = resolve_template(atom.template, self.registry)
        p = atom.params_dict
        x = t.transform(self.space, pt.state, p)
        return float(t.margin(self.space, p, pt.ctx, x[None, :])[0])

    def _conjunct_data(self, conj: Sequence[Atom], pt: LabeledPoint):
        bound = [bind_atom(a, pt.binding, self.registry) for a in conj]
        margins = [self._atom_margin(a, pt) for a in bound]
        dims: List[str] = []
        disjoint = True
        for a in bound:
            t = resolve_template(a.template, self.registry)
            for d in t.constraint_dims(self.space, a.params_dict):
                if d.id in dims:
                    disjoint = False
                dims.append(d.id)
        return bound, margins, disjoint

    def _region(self, bound_atoms: Tuple[Atom, ...], ctx: State):
        key = (bound_atoms, id(ctx))
        if key not in self._regions:
            f = Formula((bound_atoms,))
            cover = formula_region(f, ctx, self.space, self.bounds, self.registry)
            self._regions[key] = cover[0]
        return self._regions[key]

    def _solver_metric(self, kind: str, bound_atoms: Tuple[Atom, ...],
                       pt: LabeledPoint) -> float:
        from .predicates import constraint_point

        region = self._region(bound_atoms, pt.ctx)
        x = constraint_point(self.space, pt.state, region.dims)
        key = (kind, region.fingerprint, x.tobytes())
        if key not in self._distances:
            if kind == "dist":
                res = distance_info(region, x)
                self.low_confidence += res.low_confidence
                self._distances[key] = float(res.value)
            else:
                self._distances[key] = float(boundary_depth(region, x))
        return self._distances[key]

    def conjunct_inside(self, margins: Sequence[float]) -> bool:
        return all(m <= 0.0 for m in margins)

    def conjunct_dist2(self, conj: Sequence[Atom], pt: LabeledPoint) -> float:
        bound, margins, disjoint = self._conjunct_data(conj, pt)
        if disjoint:
            return sum(max(m, 0.0) ** 2 for m in margins)
        return self._solver_metric("dist", tuple(bound), pt)

    def conjunct_depth2(self, conj: Sequence[Atom], pt: LabeledPoint) -> float:
        bound, margins, disjoint = self._conjunct_data(conj, pt)
        if disjoint:
            return min(max(-m, 0.0) for m in margins) ** 2
        return self._solver_metric("depth", tuple(bound), pt)

    # -- formula-level error

    def point_error(self, f: Formula, pt: LabeledPoint) -> float:
        data = [self._conjunct_data(conj, pt) for conj in f.disjuncts]
        inside = [self.conjunct_inside(margins) for _, margins, _ in data]
        truth = any(inside)
        if truth == pt.must_include:
            return 0.0
        if pt.must_include:
            best = math.inf
            for conj, (bound, margins, disjoint) in zip(f.disjuncts, data):
                if disjoint:
                    d2 = sum(max(m, 0.0) ** 2 for m in margins)
                else:
                    d2 = self._solver_metric("dist", tuple(bound), pt)
                best = min(best, d2)
            return best
        # Escaping the union means leaving every disjunct that holds, so the
        # true depth is at least the largest per-disjunct depth.  Taking min
        # here would let a disjunct whose boundary grazes the point hide the
        # violation entirely.
        worst = 0.0
        for flag, conj, (bound, margins, disjoint) in zip(inside, f.disjuncts, data):
            if not flag:
                continue
            if disjoint:
                d2 = min(max(-m, 0.0) for m in margins) ** 2
            else:
                d2 = self._solver_metric("depth", tuple(bound), pt)
            worst = max(worst, d2)
        return worst

    def error(self, f: Formula, points: Sequence[LabeledPoint]) -> float:
        return sum(self.point_error(f, pt) for pt in points)

    def misclassified(self, f: Formula, points: Sequence[LabeledPoint]
                      ) -> List[LabeledPoint]:
        return [pt for pt in points if self.point_error(f, pt) > 0.0]


def error(f: Formula, obs: Sequence[Observation], label: RepairLabel,
          space: StateSpace, bounds: Optional[Mapping[str, DimensionInfo]] = None,
          registry: Optional[Dict[str, PredicateTemplate]] = None) -> float:
    """Sum of squared set distances of misclassified observation states."""
    computer = ErrorComputer(space, bounds, registry)
    return computer.error(f, label_points(obs, label, space))


# ---------------------------------------------------------------------------
# edit generation and the queue


class EditQueue:
    """Priority queue: param < remove < add < replace, FIFO within a class.

    Entries carry the formula they were generated for; duplicates (same base,
    op, site, and payload identity) are enqueued once.
    """

    _RANK = {"param": 0, "remove": 1, "add": 2, "replace": 3}

    def __init__(self) -> None:
        self._heap: List[Tuple[int, int, Formula, Edit]] = []
        self._seen: set = set()
        self._seq = 0

    def push(self, base: Formula, edit: Edit) -> bool:
        payload_key = atom_site_key(edit.payload) if edit.payload is not None else None
        key = (base, edit.op, edit.disjunct, edit.atom, payload_key)
        if key in self._seen:
            return False
        self._seen.add(key)
        heapq.heappush(self._heap, (self._RANK[edit.op], self._seq, base, edit))
        self._seq += 1
        return True

    def pop(self) -> Tuple[Formula, Edit]:
        _, _, base, edit = heapq.heappop(self._heap)
        return base, edit

    def __len__(self) -> int:
        return len(self._heap)


def _has_continuous(atom: Atom, registry) -> bool:
    t = resolve_template(atom.template, registry)
    return any(ps.kind == "continuous" for ps in t.param_spec)


def _payload_skeletons(misclassified: Sequence[Observation],
                       registry: Optional[Dict[str, PredicateTemplate]] = None
                       ) -> List[Atom]:
    """One candidate atom per template, referencing the action's formal object
    parameters (theta keys), the manipulator, and the observed symbols."""
    object_refs = sorted({name for h in misclassified for name in h.theta})
    symbol_refs = sorted({name for h in misclassified for name in h.q.q_s})
    symbol_seed = {
        name: h.q.q_s[name] for h in misclassified for name in h.q.q_s}
    out: List[Atom] = []
    from .predicates import _BUILTINS

    reg = _BUILTINS if registry is None else registry
    templates = {t.name: t for t in reg.values()}  # collapse alias spellings
    for name in sorted(templates):
        t = templates[name]
        fills: List[Dict[str, Any]] = [{}]
        ok = True
        for ps in t.param_spec:
            if ps.kind == "object":
                choices = ["manip"] if ps.name == "manip" else object_refs
            elif ps.kind == "symbol":
                choices = symbol_refs
            elif ps.kind == "continuous":
                choices = [ps.upper]  # inert placeholder, re-optimized on apply
            else:  # discrete placeholder from an observed value
                choices = None
            if choices is None:
                fills = [dict(f, **{ps.name: symbol_seed.get(f.get("s", ""), True)})
                         for f in fills]
                continue
            if not choices:
                ok = False
                break
            fills = [dict(f, **{ps.name: c}) for f in fills for c in choices]
        if not ok:
            continue
        for params in fills:
            out.append(make_atom(t.name, registry, **params))
    return out


def generate_edits(f: Formula, misclassified: Sequence[Observation],
                   queue: EditQueue,
                   registry: Optional[Dict[str, PredicateTemplate]] = None) -> int:
    """Enqueue every param/remove/add/replace edit the misclassified set
    motivates; returns how many were new."""
    if not misclassified:
        return 0
    added = 0
    for di, conj in enumerate(f.disjuncts):
        for ai, atom in enumerate(conj):
            if _has_continuous(atom, registry):
                added += queue.push(f, Edit("param", di, ai))
    for di, conj in enumerate(f.disjuncts):
        for ai in range(len(conj)):
            added += queue.push(f, Edit("remove", di, ai))
    payloads = _payload_skeletons(misclassified, registry)
    sites = list(range(len(f.disjuncts))) + [NEW_DISJUNCT]
    for payload in payloads:
        for di in sites:
            added += queue.push(f, Edit("add", di, None, payload))
    for payload in payloads:
        for di, conj in enumerate(f.disjuncts):
            for ai in range(len(conj)):
                added += queue.push(f, Edit("replace", di, ai, payload))
    return added


# ---------------------------------------------------------------------------
# parameter optimization


def _atom_stats(atom: Atom, points: Sequence[LabeledPoint], space: StateSpace,
                registry, computer: ErrorComputer) -> List[float]:
    """Observation-transformed statistics: the continuous value at which each
    point sits exactly on the atom's boundary."""
    t = resolve_template(atom.template, registry)
    cont = [ps for ps in t.param_spec if ps.kind == "continuous"]
    if not cont:
        return []
    current = float(atom.value(cont[0].name))
    stats = []
    for pt in points:
        bound = bind_atom(atom, pt.binding, registry)
        m = computer._atom_margin(bound, pt)
        stats.append(m + current)
    return stats


def _replace_atom(f: Formula, di: int, ai: int, atom: Atom) -> Formula:
    disjuncts = list(map(list, f.disjuncts))
    disjuncts[di][ai] = atom
    return Formula(tuple(tuple(c) for c in disjuncts))


def optimize_params(f: Formula, site: Tuple[int, int], obs: Sequence[Observation],
                    label: RepairLabel, space: StateSpace,
                    bounds: Optional[Mapping[str, DimensionInfo]] = None,
                    registry: Optional[Dict[str, PredicateTemplate]] = None,
                    computer: Optional[ErrorComputer] = None,
                    points: Optional[Sequence[LabeledPoint]] = None
                    ) -> Dict[str, Any]:
    """Best parameter values for one atom: enumerate discrete domains, and for
    each assignment run a multi-start bounded 1-D search over the continuous
    parameter seeded from the observations' transformed values."""
    di, ai = site
    atom = f.disjuncts[di][ai]
    t = resolve_template(atom.template, registry)
    computer = computer or ErrorComputer(space, bounds, registry)
    points = list(points) if points is not None else label_points(obs, label, space)

    discrete = [ps for ps in t.param_spec if ps.kind == "discrete"]
    cont = [ps for ps in t.param_spec if ps.kind == "continuous"]
    if len(cont) > 1:
        raise NotImplementedError("joint optimization of several continuous parameters")

    def objective(params: Dict[str, Any]) -> float:
        return computer.error(_replace_atom(f, di, ai, atom.rebind(**params)), points)

    if computer.error(f, points) <= ZERO_ERROR:
        return atom.params_dict  # nothing misclassified, leave parameters alone

    choices = [
        [(ps.name, v) for v in t.domain_of(space, atom.params_dict, ps.name)]
        for ps in discrete
    ]
    best: Tuple[float, Dict[str, Any]] = (math.inf, atom.params_dict)
    for combo in itertools.product(*choices) if choices else [()]:
        fixed = dict(combo)
        if not cont:
            err = objective(fixed)
            if err < best[0]:
                best = (err, {**atom.params_dict, **fixed})
            continue
        ps = cont[0]
        lo = ps.lower + 1e-9 * max(1.0, abs(ps.lower))
        hi = ps.upper
        seed_atom = atom.rebind(**fixed) if fixed else atom
        stats = _atom_stats(seed_atom, points, space, registry, computer)
        starts = sorted({min(max(s, lo), hi) for s in stats}
                        | {float(atom.value(ps.name)), 0.5 * (lo + hi)})
        coarse = sorted(
            ((objective({**fixed, ps.name: x}), x) for x in starts),
            key=lambda pair: pair[0],
        )
        for err0, x0 in coarse[:3]:
            res = scipy.optimize.minimize(
                lambda v: objective({**fixed, ps.name: float(v[0])}),
                [x0], method="Nelder-Mead", bounds=[(lo, hi)],
                options={"xatol": 1e-10, "fatol": 0.0, "maxfev": 60},
            )
            for err_x, x in ((err0, x0), (float(res.fun), float(res.x[0]))):
                if err_x < best[0] - 1e-15:
                    best = (err_x, {**atom.params_dict, **fixed, ps.name: x})
    return best[1]


# ---------------------------------------------------------------------------
# applying edits


def _insert_atom(f: Formula, di: int, atom: Atom) -> Formula:
    if di == NEW_DISJUNCT:
        return Formula(f.disjuncts + ((atom,),))
    disjuncts = list(map(tuple, f.disjuncts))
    disjuncts[di] = disjuncts[di] + (atom,)
    return Formula(tuple(disjuncts))


def _remove_atom(f: Formula, di: int, ai: int) -> Formula:
    disjuncts = list(map(list, f.disjuncts))
    del disjuncts[di][ai]
    if not disjuncts[di]:
        del disjuncts[di]
    if not disjuncts:
        raise InvalidEdit("removing the last atom would empty the formula")
    return Formula(tuple(tuple(c) for c in disjuncts))


def apply_edit(f: Formula, e: Edit, obs: Sequence[Observation], label: RepairLabel,
               space: StateSpace,
               bounds: Optional[Mapping[str, DimensionInfo]] = None,
               registry: Optional[Dict[str, PredicateTemplate]] = None,
               computer: Optional[ErrorComputer] = None,
               points: Optional[Sequence[LabeledPoint]] = None) -> Formula:
    """Return the edited formula; add/replace payload parameters are seeded
    from the observations and refined by optimize_params. Never mutates f."""
    if e.disjunct != NEW_DISJUNCT and not 0 <= e.disjunct < len(f.disjuncts):
        raise InvalidEdit(f"no disjunct {e.disjunct}")
    if e.op in ("param", "remove", "replace"):
        if e.atom is None or not 0 <= e.atom < len(f.disjuncts[e.disjunct]):
            raise InvalidEdit(f"no atom {e.atom} in disjunct {e.disjunct}")

    if e.op == "remove":
        return _remove_atom(f, e.disjunct, e.atom)

    if e.op == "param":
        params = optimize_params(f, (e.disjunct, e.atom), obs, label, space,
                                 bounds, registry, computer, points)
        return _replace_atom(f, e.disjunct, e.atom, f.disjuncts[e.disjunct][e.atom].rebind(**params))

    if e.payload is None:
        raise InvalidEdit(f"{e.op} edit without a payload")

    if e.op == "add":
        target = f.disjuncts[e.disjunct] if e.disjunct != NEW_DISJUNCT else ()
        keys = {atom_site_key(a, registry) for a in target}
        if atom_site_key(e.payload, registry) in keys:
            raise InvalidEdit("conjunct already holds an atom with these references")
        g = _insert_atom(f, e.disjunct, e.payload)
        di = e.disjunct if e.disjunct != NEW_DISJUNCT else len(g.disjuncts) - 1
        ai = len(g.disjuncts[di]) - 1
        params = optimize_params(g, (di, ai), obs, label, space, bounds,
                                 registry, computer, points)
        return _replace_atom(g, di, ai, e.payload.rebind(**params))

    if e.op == "replace":
        others = [a for i, a in enumerate(f.disjuncts[e.disjunct]) if i != e.atom]
        keys = {atom_site_key(a, registry) for a in others}
        if atom_site_key(e.payload, registry) in keys:
            raise InvalidEdit("conjunct already holds an atom with these references")
        g = _replace_atom(f, e.disjunct, e.atom, e.payload)
        params = optimize_params(g, (e.disjunct, e.atom), obs, label, space,
                                 bounds, registry, computer, points)
        return _replace_atom(g, e.disjunct, e.atom, e.payload.rebind(**params))

    raise InvalidEdit(f"unknown edit op {e.op!r}")


# ---------------------------------------------------------------------------
# the anytime repair loop


@dataclass
class Budget:
    """Wall-clock seconds, an evaluated-edit cap, or both (first exhausted wins)."""

    seconds: Optional[float] = None
    edits: Optional[int] = None

    def __post_init__(self) -> None:
        if self.seconds is None and self.edits is None:
            raise ValueError("a budget needs seconds, edits, or both")
        if (self.seconds is not None and self.seconds <= 0) or \
           (self.edits is not None and self.edits < 0):
            raise ValueError("budgets must be positive")

    @staticmethod
    def of(value: "Budget | float | int") -> "Budget":
        if isinstance(value, Budget):
            return value
        return Budget(seconds=float(value))

    def halved(self) -> "Budget":
        return Budget(
            seconds=None if self.seconds is None else self.seconds / 2.0,
            edits=None if self.edits is None else self.edits // 2,
        )


@dataclass
class RepairEvent:
    edit_index: int
    op: str
    error: float
    best_error: float
    elapsed_s: float
    formula: str


@dataclass
class RepairDiagnostics:
    initial_error: float = 0.0
    final_error: float = 0.0
    evaluated: int = 0
    invalid: int = 0
    discarded_empty: int = 0
    events: List[RepairEvent] = field(default_factory=list)


def _formula_is_empty_region(f: Formula, ctx: State, space: StateSpace,
                             bounds, registry) -> bool:
    cover = formula_region(f, ctx, space, bounds, registry)
    return all(is_empty(elem) for elem in cover)


def repair(f: Formula, obs: Sequence[Observation], label: RepairLabel,
           timeout: "Budget | float", space: StateSpace,
           bounds: Optional[Mapping[str, DimensionInfo]] = None,
           registry: Optional[Dict[str, PredicateTemplate]] = None,
           diagnostics: Optional[RepairDiagnostics] = None) -> Formula:
    """Anytime best-first edit search; never returns a formula scoring worse
    than the input on the given observations."""
    budget = Budget.of(timeout)
    t0 = time.monotonic()
    computer = ErrorComputer(space, bounds, registry)
    points = label_points(obs, label, space)
    diag = diagnostics if diagnostics is not None else RepairDiagnostics()

    def elapsed() -> float:
        # edit-budget mode reports zero so that runs are byte-reproducible
        return time.monotonic() - t0 if budget.edits is None else 0.0

    def out_of_budget() -> bool:
        if budget.seconds is not None and time.monotonic() - t0 > budget.seconds:
            return True
        return budget.edits is not None and diag.evaluated >= budget.edits

    best = f
    err = computer.error(f, points)
    diag.initial_error = diag.final_error = err

    queue = EditQueue()
    generate_edits(f, misclassified_obs(f, obs, label, space, computer, points),
                   queue, registry)

    def spuriously_empty(candidate: Formula) -> bool:
        # a candidate that correctly includes some point cannot be empty
        if any(pt.must_include and computer.point_error(candidate, pt) == 0.0
               for pt in points):
            return False
        return _formula_is_empty_region(candidate, points[0].ctx, space,
                                        bounds, registry)

    while len(queue) and err > ZERO_ERROR and not out_of_budget():
        base, edit = queue.pop()
        try:
            candidate = apply_edit(base, edit, obs, label, space, bounds,
                                   registry, computer, points)
        except InvalidEdit:
            diag.invalid += 1
            continue
        eps = computer.error(candidate, points)
        diag.evaluated += 1
        if eps <= err and spuriously_empty(candidate):
            diag.discarded_empty += 1
            diag.events.append(RepairEvent(diag.evaluated, edit.op, eps, err,
                                           elapsed(), print_formula(best)))
            continue
        if eps <= err:
            mis2 = misclassified_obs(candidate, obs, label, space, computer, points)
            generate_edits(candidate, mis2, queue, registry)
        if eps < err:
            best, err = candidate, eps
        diag.events.append(RepairEvent(diag.evaluated, edit.op, eps, err,
                                       elapsed(), print_formula(best)))
    diag.final_error = err
    return best


def points_to_obs(points: Sequence[LabeledPoint], obs: Sequence[Observation],
                  label: RepairLabel, space: StateSpace) -> List[Optional[LabeledPoint]]:
    """Align label_points output back to the observation list (effect repairs
    drop idle observations, so some slots are None)."""
    out: List[Optional[LabeledPoint]] = []
    it = iter(points)
    for h in obs:
        acted = not states_equal(space, h.q, h.q_prime)
        if label is RepairLabel.SHOULD_EXCLUDE or acted:
            out.append(next(it))
        else:
            out.append(None)
    return out


def misclassified_obs(f: Formula, obs: Sequence[Observation], label: RepairLabel,
                      space: StateSpace, computer: ErrorComputer,
                      points: Sequence[LabeledPoint]) -> List[Observation]:
    aligned = points_to_obs(points, obs, label, space)
    return [h for h, pt in zip(obs, aligned)
            if pt is not None and computer.point_error(f, pt) > 0.0]


def subsample(expected: Sequence[Observation], unexpected_obs: Sequence[Observation],
              rng: np.random.Generator) -> List[Observation]:
    """All unexpected observations plus an equally sized random slice of the
    expected pool (all of it when the pool is smaller)."""
    take = min(len(unexpected_obs), len(expected))
    picked: List[Observation] = []
    if take:
        idx = rng.choice(len(expected), size=take, replace=False)
        picked = [expected[i] for i in sorted(idx)]
    elif not unexpected_obs:
        return []
    return list(unexpected_obs) + picked


@dataclass
class ActionRepairOutcome:
    model: ActionModel
    chose: str  # "constraint" | "effect"
    constraint_error: float
    effect_error: float
    constraint_diag: RepairDiagnostics
    effect_diag: RepairDiagnostics


def repair_action(model: ActionModel, H: Sequence[Observation],
                  timeout: "Budget | float", space: StateSpace,
                  rng: np.random.Generator,
                  bounds: Optional[Mapping[str, DimensionInfo]] = None,
                  registry: Optional[Dict[str, PredicateTemplate]] = None
                  ) -> ActionRepairOutcome:
    """Sub-sample, repair the constraint and the effect on separate half
    budgets, and adopt whichever candidate scores lower (ties keep the
    constraint repair)."""
    flags = [unexpected(model, h, space, registry) for h in H]
    U = [h for h, u in zip(H, flags) if u]
    E = [h for h, u in zip(H, flags) if not u]
    if not U:
        raise ValueError("repair_action needs at least one unexpected observation")
    sub = subsample(E, U, rng)
    half = Budget.of(timeout).halved()

    diag_phi = RepairDiagnostics()
    phi = repair(model.constraint, sub, RepairLabel.SHOULD_EXCLUDE, half, space,
                 bounds, registry, diag_phi)
    diag_psi = RepairDiagnostics()
    psi = repair(model.effect, sub, RepairLabel.SHOULD_INCLUDE, half, space,
                 bounds, registry, diag_psi)

    # each candidate model keeps the other formula, whose error persists
    err_phi_side = diag_phi.final_error + error(model.effect, sub,
                                                RepairLabel.SHOULD_INCLUDE,
                                                space, bounds, registry)
    err_psi_side = diag_psi.final_error + error(model.constraint, sub,
                                                RepairLabel.SHOULD_EXCLUDE,
                                                space, bounds, registry)
    if err_phi_side <= err_psi_side:
        fixed = ActionModel(model.name, model.param_names, phi, model.effect)
        chose = "constraint"
    else:
        fixed = ActionModel(model.name, model.param_names, model.constraint, psi)
        chose = "effect"
    return ActionRepairOutcome(fixed, chose, err_phi_side, err_psi_side,
                               diag_phi, diag_psi)


# ---------------------------------------------------------------------------
# serialization


def print_action(model: ActionModel) -> str:
    params = " ".join(model.param_names)
    return (f"(action {model.name} (params {params})"
            f" (constraint {print_formula(model.constraint)})"
            f" (effect {print_formula(model.effect)}))")


def _subtree_text(tree) -> str:
    items, _ = tree
    if isinstance(items, str):
        return items
    return "(" + " ".join(_subtree_text(sub) for sub in items) + ")"


def parse_action(text: str,
                 registry: Optional[Dict[str, PredicateTemplate]] = None) -> ActionModel:
    tokens = _tokenize(text)
    if not tokens:
        raise FormulaSyntaxError("empty action text", 0)
    tree, at = _read_sexpr(tokens, 0)
    if at != len(tokens):
        raise FormulaSyntaxError("trailing input after the action block", tokens[at][1])
    items, pos = tree
    if isinstance(items, str) or len(items) != 5 or items[0][0] != "action":
        raise FormulaSyntaxError(
            "expected (action <name> (params ...) (constraint ...) (effect ...))", pos)
    name = items[1][0]
    if not isinstance(name, str):
        raise FormulaSyntaxError("action name must be a token", items[1][1])
    sections = {}
    for sub in items[2:]:
        sub_items, sub_pos = sub
        if isinstance(sub_items, str) or not sub_items or \
                not isinstance(sub_items[0][0], str):
            raise FormulaSyntaxError("expected a (params|constraint|effect ...) block", sub_pos)
        sections[sub_items[0][0]] = (sub_items[1:], sub_pos)
    missing = {"params", "constraint", "effect"} - set(sections)
    if missing:
        raise FormulaSyntaxError(f"action block is missing {sorted(missing)}", pos)
    for tok, tok_pos in sections["params"][0]:
        if not isinstance(tok, str):
            raise FormulaSyntaxError("action parameters must be plain names", tok_pos)
    params = tuple(tok for tok, _ in sections["params"][0])
    for block in ("constraint", "effect"):
        if len(sections[block][0]) != 1:
            raise FormulaSyntaxError(f"{block} block must hold exactly one formula",
                                     sections[block][1])
    constraint = parse_formula(_subtree_text(sections["constraint"][0][0]), registry)
    effect = parse_formula(_subtree_text(sections["effect"][0][0]), registry)
    return ActionModel(name, params, constraint, effect)


def observation_to_record(space: StateSpace, h: Observation) -> Dict[str, Any]:
    return {
        "action": h.action,
        "q": state_to_record(space, h.q),
        "theta": dict(h.theta),
        "q_prime": state_to_record(space, h.q_prime),
        "timestamp": h.timestamp,
    }


def observation_from_record(space: StateSpace, rec: Mapping[str, Any]) -> Observation:
    return Observation(
        action=rec["action"],
        q=state_from_record(space, rec["q"]),
        theta=dict(rec["theta"]),
        q_prime=state_from_record(space, rec["q_prime"]),
        timestamp=float(rec.get("timestamp", 0.0)),
    )


def write_observation_log(path: str, space: StateSpace,
                          obs: Sequence[Observation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in obs:
            fh.write(json.dumps(observation_to_record(space, h)) + "\n")


def read_observation_log(path: str, space: StateSpace) -> List[Observation]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(observation_from_record(space, json.loads(line)))
    return out
