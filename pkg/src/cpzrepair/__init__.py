"""Constrained-polynomial-zonotope set algebra and action-model repair."""

from .cpz import (
    Cpz,
    DimensionInfo,
    boundary_depth,
    compact,
    constraint_residual,
    contains,
    distance_to_set,
    embed,
    evaluate_point,
    from_text,
    intersect,
    is_empty,
    project,
    sample_point,
    to_text,
    unify,
    union,
)
from .nlp import NlpOptions

__all__ = [
    "Cpz",
    "DimensionInfo",
    "NlpOptions",
    "boundary_depth",
    "compact",
    "constraint_residual",
    "contains",
    "distance_to_set",
    "embed",
    "evaluate_point",
    "from_text",
    "intersect",
    "is_empty",
    "project",
    "sample_point",
    "to_text",
    "unify",
    "union",
]
