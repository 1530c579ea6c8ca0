"""Hybrid symbolic-geometric states and their bounded real-vector encoding.

A state couples real robot/object configurations with finite-domain symbols.
Symbols ride along in the real encoding as integer codes, so downstream set
machinery only ever sees bounded real vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Sequence, Tuple

import numpy as np

from .cpz import DimensionInfo

SymbolValue = Any

POSE_FIELDS = ("x", "y", "z", "roll")


@dataclass(frozen=True)
class SymbolDef:
    """A named symbol over an ordered finite domain.

    Each value gets an integer code equal to its index, so codes are
    consecutive from 0 and the encoding is order-determined.
    """

    name: str
    domain: Tuple[SymbolValue, ...]
    codes: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        domain = tuple(self.domain)
        object.__setattr__(self, "domain", domain)
        if not self.name:
            raise ValueError("symbol name must be non-empty")
        if not domain:
            raise ValueError(f"symbol {self.name!r} needs a non-empty domain")
        if len(set(domain)) != len(domain):
            raise ValueError(f"symbol {self.name!r} has duplicate domain values")
        codes = tuple(self.codes) if self.codes else tuple(range(len(domain)))
        if codes != tuple(range(len(domain))):
            raise ValueError(f"codes of {self.name!r} must be 0..{len(domain) - 1} in order")
        object.__setattr__(self, "codes", codes)

    def code_of(self, value: SymbolValue) -> int:
        try:
            return self.domain.index(value)
        except ValueError:
            raise ValueError(f"{value!r} is not in the domain of symbol {self.name!r}") from None

    def value_of(self, code: int) -> SymbolValue:
        if not 0 <= code < len(self.domain):
            raise ValueError(f"code {code} out of range for symbol {self.name!r}")
        return self.domain[code]

    def decode_coord(self, x: float) -> SymbolValue:
        """Map a real coordinate to the value whose bin [code-0.5, code+0.5) holds it.

        Coordinates beyond the outermost bins clamp to the nearest code.
        """
        code = int(math.floor(x + 0.5))
        code = min(max(code, 0), len(self.domain) - 1)
        return self.domain[code]

    @property
    def dim(self) -> DimensionInfo:
        # Bin edges, not code endpoints: decode clamps anything inside to a code.
        return DimensionInfo(self.name, -0.5, len(self.domain) - 0.5)


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Dimension layout: robot dims, then per-object dims, then symbol codes."""

    robot_dims: Tuple[DimensionInfo, ...]
    object_dims: Dict[str, Tuple[DimensionInfo, ...]]
    symbols: Tuple[SymbolDef, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "robot_dims", tuple(self.robot_dims))
        object.__setattr__(
            self,
            "object_dims",
            {name: tuple(dims) for name, dims in self.object_dims.items()},
        )
        object.__setattr__(self, "symbols", tuple(self.symbols))
        ids = [d.id for d in self.dims]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"dimension ids must be unique, repeated: {dupes}")
        names = [s.name for s in self.symbols]
        if len(set(names)) != len(names):
            raise ValueError("symbol names must be unique")

    @property
    def object_names(self) -> Tuple[str, ...]:
        return tuple(self.object_dims)

    @property
    def dims(self) -> Tuple[DimensionInfo, ...]:
        out = list(self.robot_dims)
        for dims in self.object_dims.values():
            out.extend(dims)
        out.extend(s.dim for s in self.symbols)
        return tuple(out)

    @property
    def dim_ids(self) -> Tuple[str, ...]:
        return tuple(d.id for d in self.dims)

    @property
    def n(self) -> int:
        return len(self.dims)

    def index(self, dim_id: str) -> int:
        try:
            return self.dim_ids.index(dim_id)
        except ValueError:
            raise KeyError(f"unknown dimension id {dim_id!r}") from None

    def symbol(self, name: str) -> SymbolDef:
        for s in self.symbols:
            if s.name == name:
                return s
        raise KeyError(f"unknown symbol {name!r}")

    def bounds(self) -> Dict[str, DimensionInfo]:
        return {d.id: d for d in self.dims}

    def validate(self, s: "State") -> None:
        if len(s.q_r) != len(self.robot_dims):
            raise ValueError(f"q_r has {len(s.q_r)} coordinates, expected {len(self.robot_dims)}")
        if set(s.q_o) != set(self.object_dims):
            raise ValueError(f"state objects {sorted(s.q_o)} != space objects {sorted(self.object_dims)}")
        if set(s.q_s) != {sym.name for sym in self.symbols}:
            raise ValueError("state symbols do not match the space's symbols")
        for dim, val in zip(self.robot_dims, s.q_r):
            _check_bounded(dim, val)
        for name, dims in self.object_dims.items():
            if len(s.q_o[name]) != len(dims):
                raise ValueError(f"object {name!r} has {len(s.q_o[name])} coordinates, expected {len(dims)}")
            for dim, val in zip(dims, s.q_o[name]):
                _check_bounded(dim, val)
        for sym in self.symbols:
            sym.code_of(s.q_s[sym.name])


def _check_bounded(dim: DimensionInfo, val: float) -> None:
    if not (dim.lower - 1e-9 <= val <= dim.upper + 1e-9):
        raise ValueError(f"{dim.id}={val} outside [{dim.lower}, {dim.upper}]")


@dataclass(frozen=True, eq=False)
class State:
    """One world configuration: robot vector, per-object vectors, symbol values."""

    q_r: Tuple[float, ...]
    q_o: Dict[str, Tuple[float, ...]]
    q_s: Dict[str, SymbolValue]

    def __post_init__(self) -> None:
        object.__setattr__(self, "q_r", tuple(float(v) for v in self.q_r))
        object.__setattr__(
            self,
            "q_o",
            {name: tuple(float(v) for v in vec) for name, vec in self.q_o.items()},
        )
        object.__setattr__(self, "q_s", dict(self.q_s))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, State):
            return NotImplemented
        return self.q_r == other.q_r and self.q_o == other.q_o and self.q_s == other.q_s

    def replace(self, *, q_r: Sequence[float] | None = None,
                q_o: Mapping[str, Sequence[float]] | None = None,
                q_s: Mapping[str, SymbolValue] | None = None) -> "State":
        new_o = dict(self.q_o)
        if q_o is not None:
            new_o.update({k: tuple(v) for k, v in q_o.items()})
        new_s = dict(self.q_s)
        if q_s is not None:
            new_s.update(q_s)
        return State(tuple(q_r) if q_r is not None else self.q_r, new_o, new_s)


def encode(space: StateSpace, s: State) -> np.ndarray:
    """Concatenate robot, object, and symbol-code coordinates in canonical order."""
    space.validate(s)
    coords = list(s.q_r)
    for name in space.object_names:
        coords.extend(s.q_o[name])
    for sym in space.symbols:
        coords.append(float(sym.code_of(s.q_s[sym.name])))
    return np.asarray(coords, dtype=float)


def decode(space: StateSpace, r: np.ndarray) -> State:
    """Invert encode; symbol coordinates snap to the code bin containing them."""
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.size != space.n:
        raise ValueError(f"vector has {r.size} coordinates, expected {space.n}")
    pos = len(space.robot_dims)
    q_r = tuple(r[:pos])
    q_o = {}
    for name in space.object_names:
        k = len(space.object_dims[name])
        q_o[name] = tuple(r[pos:pos + k])
        pos += k
    q_s = {}
    for sym in space.symbols:
        q_s[sym.name] = sym.decode_coord(r[pos])
        pos += 1
    return State(q_r, q_o, q_s)


def sample_state(space: StateSpace, rng: np.random.Generator) -> State:
    """Uniform over every bounded dimension and every symbol domain."""
    q_r = tuple(rng.uniform(d.lower, d.upper) for d in space.robot_dims)
    q_o = {
        name: tuple(rng.uniform(d.lower, d.upper) for d in dims)
        for name, dims in space.object_dims.items()
    }
    q_s = {s.name: s.domain[rng.integers(len(s.domain))] for s in space.symbols}
    return State(q_r, q_o, q_s)


def state_to_record(space: StateSpace, s: State) -> Dict[str, Any]:
    """Flat JSON-friendly mapping keyed by dimension id."""
    space.validate(s)
    rec: Dict[str, Any] = {}
    for dim, val in zip(space.robot_dims, s.q_r):
        rec[dim.id] = val
    for name in space.object_names:
        for dim, val in zip(space.object_dims[name], s.q_o[name]):
            rec[dim.id] = val
    for sym in space.symbols:
        rec[sym.name] = s.q_s[sym.name]
    return rec


def state_from_record(space: StateSpace, rec: Mapping[str, Any]) -> State:
    missing = [i for i in space.dim_ids if i not in rec]
    if missing:
        raise ValueError(f"record is missing dimensions: {missing}")
    q_r = tuple(float(rec[d.id]) for d in space.robot_dims)
    q_o = {
        name: tuple(float(rec[d.id]) for d in dims)
        for name, dims in space.object_dims.items()
    }
    q_s = {sym.name: rec[sym.name] for sym in space.symbols}
    s = State(q_r, q_o, q_s)
    space.validate(s)
    return s


def pose_dims(body: str, *, reach: float = 1.0) -> Tuple[DimensionInfo, ...]:
    """x, y, z in [-reach, reach] metres plus roll in [-pi, pi]."""
    return (
        DimensionInfo(f"{body}.x", -reach, reach),
        DimensionInfo(f"{body}.y", -reach, reach),
        DimensionInfo(f"{body}.z", -reach, reach),
        DimensionInfo(f"{body}.roll", -math.pi, math.pi),
    )


def desk_space(objects: Sequence[str] = ("obj",), *, reach: float = 1.0) -> StateSpace:
    """Desk-scale world: a free-flying gripper pose, k movable object poses,
    and a Boolean `manip-empty` symbol saying whether the gripper holds nothing.
    """
    return StateSpace(
        robot_dims=pose_dims("manip", reach=reach),
        object_dims={name: pose_dims(name, reach=reach) for name in objects},
        symbols=(SymbolDef("manip-empty", (False, True)),),
    )
