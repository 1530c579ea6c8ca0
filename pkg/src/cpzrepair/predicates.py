"""Predicate templates, atoms, DNF formulas, and formula-to-set composition.

A template pairs a constraint-space transform (state to a small bounded
vector) with a parameterized set over those constraint dimensions. Atoms bind
template parameters; formulas are disjunctions of conjunctions of atoms.
Evaluation is pointwise; set composition (unify + intersect per conjunct) is
only used where a region object is genuinely needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cpz import (
    Cpz,
    DimensionInfo,
    bounds_map,
    intersect,
    unify,
)
from .states import State, StateSpace

WORKSPACE_DIAMETER = 2.0 * math.sqrt(3.0)

Params = Mapping[str, Any]


def wrap_angle(x: float) -> float:
    """Wrap to [-pi, pi); the set machinery works on the unwrapped line."""
    return (x + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class ParamSpec:
    """One template parameter: continuous(lower, upper], discrete(domain),
    or a reference to a body or symbol resolved against the state space."""

    name: str
    kind: str  # "continuous" | "discrete" | "object" | "symbol"
    lower: float = 0.0
    upper: float = 0.0
    domain: Tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "discrete", "object", "symbol"):
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.kind == "continuous" and not self.lower < self.upper:
            raise ValueError(f"parameter {self.name!r} needs lower < upper")

    @property
    def is_ref(self) -> bool:
        return self.kind in ("object", "symbol")


@dataclass(frozen=True, eq=False)
class PredicateTemplate:
    """Named constraint-space transform plus a parameterized set builder.

    `margin` is the signed distance of a transformed point to the atom's set
    (negative inside, positive outside); it is the closed-form twin of the
    set built by `cpz_template` and is cross-checked against it in tests.
    """

    name: str
    param_spec: Tuple[ParamSpec, ...]
    constraint_dims: Callable[[StateSpace, Params], Tuple[DimensionInfo, ...]]
    transform: Callable[[StateSpace, State, Params], np.ndarray]
    cpz_template: Callable[[StateSpace, Params, State], Cpz]
    margin: Callable[[StateSpace, Params, State, np.ndarray], np.ndarray]
    complement: Optional[Callable[[StateSpace, Params], "Atom"]] = None
    discrete_values: Optional[Callable[[StateSpace, Params, str], Tuple[Any, ...]]] = None

    def spec(self, pname: str) -> ParamSpec:
        for ps in self.param_spec:
            if ps.name == pname:
                return ps
        raise KeyError(f"template {self.name!r} has no parameter {pname!r}")

    def domain_of(self, space: StateSpace, params: Params, pname: str) -> Tuple[Any, ...]:
        ps = self.spec(pname)
        if ps.kind != "discrete":
            raise ValueError(f"parameter {pname!r} of {self.name!r} is not discrete")
        if self.discrete_values is not None:
            return self.discrete_values(space, params, pname)
        return ps.domain


@dataclass(frozen=True)
class Atom:
    """A template name with all parameters bound, in declaration order."""

    template: str
    params: Tuple[Tuple[str, Any], ...]

    @property
    def params_dict(self) -> Dict[str, Any]:
        return dict(self.params)

    def value(self, name: str) -> Any:
        for key, val in self.params:
            if key == name:
                return val
        raise KeyError(f"atom {self.template!r} has no parameter {name!r}")

    def rebind(self, **changes: Any) -> "Atom":
        unknown = set(changes) - {k for k, _ in self.params}
        if unknown:
            raise KeyError(f"atom {self.template!r} has no parameters {sorted(unknown)}")
        return Atom(self.template, tuple((k, changes.get(k, v)) for k, v in self.params))


def make_atom(template: str, registry: Optional[Dict[str, "PredicateTemplate"]] = None,
              **params: Any) -> Atom:
    """Bind parameters by name, validating kinds and continuous bounds."""
    t = resolve_template(template, registry)
    bound: List[Tuple[str, Any]] = []
    for ps in t.param_spec:
        if ps.name not in params:
            raise ValueError(f"atom {t.name!r} is missing parameter {ps.name!r}")
        val = params.pop(ps.name)
        if ps.is_ref:
            if not isinstance(val, str) or not val:
                raise ValueError(f"{t.name}.{ps.name} must be a non-empty name, got {val!r}")
        elif ps.kind == "continuous":
            val = float(val)
            if not ps.lower < val <= ps.upper:
                raise ValueError(
                    f"{t.name}.{ps.name}={val} outside ({ps.lower}, {ps.upper}]")
        bound.append((ps.name, val))
    if params:
        raise ValueError(f"atom {t.name!r} got unknown parameters {sorted(params)}")
    return Atom(t.name, tuple(bound))


def atom_site_key(atom: Atom, registry: Optional[Dict[str, "PredicateTemplate"]] = None
                  ) -> Tuple[Any, ...]:
    """Template name plus reference parameters; the duplicate-atom identity."""
    t = resolve_template(atom.template, registry)
    refs = tuple(atom.value(ps.name) for ps in t.param_spec if ps.is_ref)
    return (t.name,) + refs


@dataclass(frozen=True)
class Formula:
    """Disjunction of conjunctions of atoms; DNF by construction."""

    disjuncts: Tuple[Tuple[Atom, ...], ...]

    def __post_init__(self) -> None:
        disjuncts = tuple(tuple(conj) for conj in self.disjuncts)
        object.__setattr__(self, "disjuncts", disjuncts)
        if not disjuncts:
            raise ValueError("a formula needs at least one conjunct")
        for conj in disjuncts:
            if not conj:
                raise ValueError("every conjunct needs at least one atom")
            keys = [atom_site_key(a) for a in conj]
            if len(set(keys)) != len(keys):
                raise ValueError("duplicate atom (same template and references) in a conjunct")

    @staticmethod
    def single(atom: Atom) -> "Formula":
        return Formula(((atom,),))

    def all_atoms(self) -> List[Tuple[int, int, Atom]]:
        return [
            (di, ai, atom)
            for di, conj in enumerate(self.disjuncts)
            for ai, atom in enumerate(conj)
        ]


# ---------------------------------------------------------------------------
# builtin templates


def _body_coord(space: StateSpace, state: State, body: str, axis: str) -> float:
    want = f"{body}.{axis}"
    for dim, val in zip(space.robot_dims, state.q_r):
        if dim.id == want:
            return val
    dims = space.object_dims.get(body)
    if dims is not None:
        for dim, val in zip(dims, state.q_o[body]):
            if dim.id == want:
                return val
    raise KeyError(f"cannot resolve {want!r}: no such body dimension in the space")


def _position_dims(space: StateSpace, body: str) -> Tuple[DimensionInfo, ...]:
    table = space.bounds()
    try:
        return tuple(table[f"{body}.{axis}"] for axis in ("x", "y", "z"))
    except KeyError as err:
        raise KeyError(f"body {body!r} has no position dimensions") from err


def _position(space: StateSpace, state: State, body: str) -> np.ndarray:
    return np.array([_body_coord(space, state, body, ax) for ax in ("x", "y", "z")])


def ball_region(dims: Sequence[str], center: Sequence[float], d: float) -> Cpz:
    """Euclidean ball of radius d: three scaled linear generators with a slack
    factor tying a1^2+a2^2+a3^2 = (1+a4)/2."""
    eye = np.eye(3, dtype=int)
    return Cpz(
        c=np.asarray(center, dtype=float),
        G=d * np.eye(3),
        E=np.vstack([eye, np.zeros((1, 3), dtype=int)]),
        A=np.array([[1.0, 1.0, 1.0, -0.5]]),
        b=np.array([0.5]),
        R=np.block([[2 * eye, np.zeros((3, 1), dtype=int)],
                    [np.zeros((1, 3), dtype=int), np.ones((1, 1), dtype=int)]]),
        dims=tuple(dims),
    )


def interval_region(dim: str, center: float, half_width: float) -> Cpz:
    return Cpz(
        c=np.array([center]),
        G=np.array([[half_width]]),
        E=np.array([[1]], dtype=int),
        A=np.zeros((0, 0)),
        b=np.zeros(0),
        R=np.zeros((1, 0), dtype=int),
        dims=(dim,),
    )


def point_region(dim: str, value: float) -> Cpz:
    return Cpz(
        c=np.array([value]),
        G=np.zeros((1, 0)),
        E=np.zeros((0, 0), dtype=int),
        A=np.zeros((0, 0)),
        b=np.zeros(0),
        R=np.zeros((0, 0), dtype=int),
        dims=(dim,),
    )


def rolldiff_dim_id(manip: str, obj: str) -> str:
    return f"rolldiff.{manip}.{obj}"


def _dist_template() -> PredicateTemplate:
    def dims(space: StateSpace, p: Params) -> Tuple[DimensionInfo, ...]:
        return _position_dims(space, p["manip"])

    def transform(space: StateSpace, s: State, p: Params) -> np.ndarray:
        return _position(space, s, p["manip"])

    def build(space: StateSpace, p: Params, ctx: State) -> Cpz:
        center = _position(space, ctx, p["obj"])
        return ball_region([d.id for d in dims(space, p)], center, p["d"])

    def margin(space: StateSpace, p: Params, ctx: State, pts: np.ndarray) -> np.ndarray:
        center = _position(space, ctx, p["obj"])
        return np.linalg.norm(np.asarray(pts) - center, axis=-1) - p["d"]

    return PredicateTemplate(
        name="dist",
        param_spec=(
            ParamSpec("obj", "object"),
            ParamSpec("manip", "object"),
            ParamSpec("d", "continuous", lower=0.0, upper=WORKSPACE_DIAMETER),
        ),
        constraint_dims=dims,
        transform=transform,
        cpz_template=build,
        margin=margin,
    )


def _roll_template() -> PredicateTemplate:
    def dims(space: StateSpace, p: Params) -> Tuple[DimensionInfo, ...]:
        # Both roll coordinates must exist even though the transform collapses them.
        _position_dims(space, p["manip"])
        return (DimensionInfo(rolldiff_dim_id(p["manip"], p["obj"]), -math.pi, math.pi),)

    def transform(space: StateSpace, s: State, p: Params) -> np.ndarray:
        diff = _body_coord(space, s, p["manip"], "roll") - _body_coord(space, s, p["obj"], "roll")
        return np.array([wrap_angle(diff)])

    def build(space: StateSpace, p: Params, ctx: State) -> Cpz:
        return interval_region(dims(space, p)[0].id, 0.0, p["delta"])

    def margin(space: StateSpace, p: Params, ctx: State, pts: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(pts)[..., 0]) - p["delta"]

    return PredicateTemplate(
        name="roll",
        param_spec=(
            ParamSpec("obj", "object"),
            ParamSpec("manip", "object"),
            ParamSpec("delta", "continuous", lower=0.0, upper=math.pi),
        ),
        constraint_dims=dims,
        transform=transform,
        cpz_template=build,
        margin=margin,
    )


def _symbol_code(space: StateSpace, name: str, value: Any) -> float:
    return float(space.symbol(name).code_of(value))


def _symbol_template() -> PredicateTemplate:
    def dims(space: StateSpace, p: Params) -> Tuple[DimensionInfo, ...]:
        return (space.symbol(p["s"]).dim,)

    def transform(space: StateSpace, s: State, p: Params) -> np.ndarray:
        return np.array([_symbol_code(space, p["s"], s.q_s[p["s"]])])

    def build(space: StateSpace, p: Params, ctx: State) -> Cpz:
        return point_region(p["s"], _symbol_code(space, p["s"], p["v"]))

    def margin(space: StateSpace, p: Params, ctx: State, pts: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(pts)[..., 0] - _symbol_code(space, p["s"], p["v"]))

    def complement(space: StateSpace, p: Params) -> Atom:
        domain = space.symbol(p["s"]).domain
        if len(domain) != 2:
            raise ValueError(
                f"symbol {p['s']!r} has {len(domain)} values; only two-valued "
                "symbols have a registered complement")
        other = domain[1] if p["v"] == domain[0] else domain[0]
        return make_atom("symbol", s=p["s"], v=other)

    def discrete_values(space: StateSpace, p: Params, pname: str) -> Tuple[Any, ...]:
        return space.symbol(p["s"]).domain

    return PredicateTemplate(
        name="symbol",
        param_spec=(ParamSpec("s", "symbol"), ParamSpec("v", "discrete")),
        constraint_dims=dims,
        transform=transform,
        cpz_template=build,
        margin=margin,
        complement=complement,
        discrete_values=discrete_values,
    )


def _empty_template() -> PredicateTemplate:
    SYMBOL = "manip-empty"

    def dims(space: StateSpace, p: Params) -> Tuple[DimensionInfo, ...]:
        return (space.symbol(SYMBOL).dim,)

    def transform(space: StateSpace, s: State, p: Params) -> np.ndarray:
        return np.array([_symbol_code(space, SYMBOL, s.q_s[SYMBOL])])

    def build(space: StateSpace, p: Params, ctx: State) -> Cpz:
        return point_region(SYMBOL, _symbol_code(space, SYMBOL, True))

    def margin(space: StateSpace, p: Params, ctx: State, pts: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(pts)[..., 0] - _symbol_code(space, SYMBOL, True))

    def complement(space: StateSpace, p: Params) -> Atom:
        return make_atom("symbol", s=SYMBOL, v=False)

    return PredicateTemplate(
        name="empty",
        param_spec=(ParamSpec("manip", "object"),),
        constraint_dims=dims,
        transform=transform,
        cpz_template=build,
        margin=margin,
        complement=complement,
    )


def builtin_templates() -> List[PredicateTemplate]:
    return [_empty_template(), _dist_template(), _roll_template(), _symbol_template()]


def builtin_registry() -> Dict[str, PredicateTemplate]:
    reg = {t.name: t for t in builtin_templates()}
    reg["distance"] = reg["dist"]  # long-form spelling accepted on input
    return reg


_BUILTINS = builtin_registry()


def resolve_template(name: str, registry: Optional[Dict[str, PredicateTemplate]] = None
                     ) -> PredicateTemplate:
    reg = _BUILTINS if registry is None else registry
    try:
        return reg[name]
    except KeyError:
        raise KeyError(f"unknown predicate template {name!r}") from None


# ---------------------------------------------------------------------------
# evaluation


def eval_atom(atom: Atom, state: State, space: StateSpace,
              registry: Optional[Dict[str, PredicateTemplate]] = None,
              ctx: Optional[State] = None) -> bool:
    """Transform the state and test membership in the atom's (closed) set.

    Uses the template's closed-form margin; building the region and running
    set containment gives the same verdict but costs a feasibility solve per
    call, which observation classification cannot afford.

    `ctx` supplies object poses for set parameters (defaults to `state`);
    effect formulas pass the start state here.
    """
    t = resolve_template(atom.template, registry)
    p = atom.params_dict
    point = t.transform(space, state, p)
    m = t.margin(space, p, ctx if ctx is not None else state, point[None, :])[0]
    return bool(m <= 0.0)


def atom_margin(atom: Atom, state: State, space: StateSpace,
                registry: Optional[Dict[str, PredicateTemplate]] = None,
                ctx: Optional[State] = None) -> float:
    """Signed distance to the atom's set: negative inside, positive outside."""
    t = resolve_template(atom.template, registry)
    p = atom.params_dict
    point = t.transform(space, state, p)
    return float(t.margin(space, p, ctx if ctx is not None else state, point[None, :])[0])


def eval_formula(f: Formula, state: State, space: StateSpace,
                 registry: Optional[Dict[str, PredicateTemplate]] = None,
                 ctx: Optional[State] = None) -> bool:
    """OR over disjuncts of AND over atoms, each evaluated pointwise."""
    return any(
        all(eval_atom(a, state, space, registry, ctx) for a in conj)
        for conj in f.disjuncts
    )


def negate_atom(atom: Atom, space: StateSpace,
                registry: Optional[Dict[str, PredicateTemplate]] = None) -> Atom:
    t = resolve_template(atom.template, registry)
    if t.complement is None:
        raise ValueError(f"template {t.name!r} has no registered complement; "
                         "negation is only defined for symbol-valued atoms")
    return t.complement(space, atom.params_dict)


# ---------------------------------------------------------------------------
# set composition


def formula_bounds(f: Formula, space: StateSpace,
                   registry: Optional[Dict[str, PredicateTemplate]] = None
                   ) -> Dict[str, DimensionInfo]:
    """State-space bounds extended with every constraint dimension f touches."""
    table = dict(space.bounds())
    for _, _, atom in f.all_atoms():
        t = resolve_template(atom.template, registry)
        for dim in t.constraint_dims(space, atom.params_dict):
            table.setdefault(dim.id, dim)
    return table


def formula_region(f: Formula, state_ctx: State, space: StateSpace,
                   bounds: Optional[Mapping[str, DimensionInfo]] = None,
                   registry: Optional[Dict[str, PredicateTemplate]] = None) -> List[Cpz]:
    """One set per disjunct: unify the conjunct's atom sets, then intersect."""
    table = dict(formula_bounds(f, space, registry))
    if bounds is not None:
        table.update(bounds_map(bounds))
    cover = []
    for conj in f.disjuncts:
        region: Optional[Cpz] = None
        for atom in conj:
            t = resolve_template(atom.template, registry)
            piece = t.cpz_template(space, atom.params_dict, state_ctx)
            if region is None:
                region = piece
            else:
                left, right = unify(region, piece, table)
                region = intersect(left, right)
        cover.append(region)
    return cover


def constraint_coord(space: StateSpace, state: State, dim_id: str) -> float:
    """Coordinate of a state in a constraint dimension: state dimensions read
    directly, derived roll-difference dimensions computed on the fly."""
    if dim_id.startswith("rolldiff."):
        parts = dim_id.split(".")
        if len(parts) != 3:
            raise KeyError(f"malformed roll-difference dimension {dim_id!r}")
        _, manip, obj = parts
        diff = _body_coord(space, state, manip, "roll") - _body_coord(space, state, obj, "roll")
        return wrap_angle(diff)
    for sym in space.symbols:
        if sym.name == dim_id:
            return _symbol_code(space, sym.name, state.q_s[sym.name])
    for dim, val in zip(space.robot_dims, state.q_r):
        if dim.id == dim_id:
            return val
    for name, dims in space.object_dims.items():
        for dim, val in zip(dims, state.q_o[name]):
            if dim.id == dim_id:
                return val
    raise KeyError(f"unknown constraint dimension {dim_id!r}")


def constraint_point(space: StateSpace, state: State, dim_ids: Sequence[str]) -> np.ndarray:
    return np.array([constraint_coord(space, state, d) for d in dim_ids])


# ---------------------------------------------------------------------------
# concrete syntax


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


def _tokenize(text: str) -> List[Tuple[str, int]]:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            out.append((ch, i))
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append((text[i:j], i))
            i = j
    return out


def _read_sexpr(tokens: List[Tuple[str, int]], at: int):
    """Return (tree, next_index); tree is (token, pos) or a list of trees."""
    if at >= len(tokens):
        raise FormulaSyntaxError("unexpected end of input", tokens[-1][1] + 1 if tokens else 0)
    tok, pos = tokens[at]
    if tok == "(":
        items = []
        at += 1
        while True:
            if at >= len(tokens):
                raise FormulaSyntaxError("missing closing parenthesis", pos)
            if tokens[at][0] == ")":
                return (items, pos), at + 1
            item, at = _read_sexpr(tokens, at)
            items.append(item)
    if tok == ")":
        raise FormulaSyntaxError("unbalanced closing parenthesis", pos)
    return (tok, pos), at + 1


def _parse_value(ps: ParamSpec, token: str, pos: int) -> Any:
    if ps.is_ref:
        return token
    if ps.kind == "continuous":
        try:
            return float(token)
        except ValueError:
            raise FormulaSyntaxError(f"expected a number for {ps.name!r}, got {token!r}", pos)
    if token == "true":
        return True
    if token == "false":
        return False
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            pass
    return token


def _parse_atom(tree, registry) -> Atom:
    items, pos = tree
    if isinstance(items, str):
        raise FormulaSyntaxError(f"expected an atom, got bare token {items!r}", pos)
    if not items or not isinstance(items[0][0], str):
        raise FormulaSyntaxError("expected a template name", pos)
    head, head_pos = items[0]
    if head in ("and", "or"):
        raise FormulaSyntaxError(
            f"{head!r} may not nest here: formulas are a single 'or' of 'and' groups", head_pos)
    if head == "not":
        raise FormulaSyntaxError(
            "negation has no concrete syntax; bind the complement value instead "
            "(e.g. (symbol manip-empty false))", head_pos)
    try:
        t = resolve_template(head, registry)
    except KeyError:
        raise FormulaSyntaxError(f"unknown predicate template {head!r}", head_pos)
    args = items[1:]
    if len(args) != len(t.param_spec):
        raise FormulaSyntaxError(
            f"{head!r} takes {len(t.param_spec)} arguments, got {len(args)}", pos)
    bound = {}
    for ps, (arg, arg_pos) in zip(t.param_spec, args):
        if not isinstance(arg, str):
            raise FormulaSyntaxError(f"argument of {head!r} must be a token", arg_pos)
        bound[ps.name] = _parse_value(ps, arg, arg_pos)
    try:
        return make_atom(head, registry, **bound)
    except ValueError as err:
        raise FormulaSyntaxError(str(err), pos)


def _parse_conjunct(tree, registry) -> Tuple[Atom, ...]:
    items, pos = tree
    if isinstance(items, list) and items and items[0][0] == "and":
        if len(items) == 1:
            raise FormulaSyntaxError("'and' needs at least one atom", pos)
        return tuple(_parse_atom(sub, registry) for sub in items[1:])
    return (_parse_atom(tree, registry),)


def parse_formula(text: str, registry: Optional[Dict[str, PredicateTemplate]] = None
                  ) -> Formula:
    """Parse `(or ...)` of `(and ...)` of atoms; single atoms and single
    conjuncts may drop their wrappers."""
    tokens = _tokenize(text)
    if not tokens:
        raise FormulaSyntaxError("empty formula text", 0)
    tree, at = _read_sexpr(tokens, 0)
    if at != len(tokens):
        raise FormulaSyntaxError("trailing input after the formula", tokens[at][1])
    items, pos = tree
    if isinstance(items, list) and items and items[0][0] == "or":
        if len(items) == 1:
            raise FormulaSyntaxError("'or' needs at least one conjunct", pos)
        disjuncts = tuple(_parse_conjunct(sub, registry) for sub in items[1:])
    else:
        disjuncts = (_parse_conjunct(tree, registry),)
    try:
        return Formula(disjuncts)
    except ValueError as err:
        raise FormulaSyntaxError(str(err), pos)


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def print_atom(a: Atom) -> str:
    args = " ".join(_format_value(v) for _, v in a.params)
    return f"({a.template} {args})" if args else f"({a.template})"


def print_formula(f: Formula) -> str:
    def conj_text(conj: Tuple[Atom, ...]) -> str:
        if len(conj) == 1:
            return print_atom(conj[0])
        return "(and " + " ".join(print_atom(a) for a in conj) + ")"

    if len(f.disjuncts) == 1:
        return conj_text(f.disjuncts[0])
    return "(or " + " ".join(conj_text(c) for c in f.disjuncts) + ")"
