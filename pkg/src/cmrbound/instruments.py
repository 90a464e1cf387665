"""Scalar instrument families and their per-block projections.

A family ``w_1, w_2, ...`` of functions of Z is turned into unconditional
moments by projecting each member on every block's conditioning variables
and multiplying the block by the projection.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation
from .model import MomentModel
from .probability import CondTable, DiscreteLaw, cond_expectation

Scalar = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class InstrumentFamily:
    members: tuple[Scalar, ...]
    kind: str = "custom"
    labels: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.members)

    def values(self, Z: np.ndarray, k: int | None = None) -> np.ndarray:
        """(n, k) matrix of the first ``k`` members at the rows of Z."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        k = len(self) if k is None else k
        return np.column_stack([np.broadcast_to(np.asarray(w(Z), dtype=float), (Z.shape[0],))
                                for w in self.members[:k]])

    def recombined(self, A: np.ndarray) -> "InstrumentFamily":
        """Family whose first k members are A @ (w_1, ..., w_k); the rest unchanged."""
        A = np.asarray(A, dtype=float)
        k = A.shape[0]
        base = self.members[:k]

        def member(i):
            return lambda Z: sum(A[i, r] * np.asarray(base[r](Z), dtype=float) for r in range(k))

        return InstrumentFamily(tuple(member(i) for i in range(k)) + self.members[k:], "custom")


def _constant(Z):
    return np.ones(Z.shape[0])


def _indicator(point: np.ndarray) -> Scalar:
    point = np.array(point, dtype=float)
    return lambda Z: np.all(Z == point, axis=1).astype(float)


def default_family(law: DiscreteLaw) -> InstrumentFamily:
    """Constant first, then the indicator of each support point in lexicographic order."""
    pts = law.support[np.lexsort(law.support.T[::-1])]
    members = (_constant,) + tuple(_indicator(p) for p in pts)
    labels = ("1",) + tuple("1{Z=" + ",".join(f"{v:g}" for v in p) + "}" for p in pts)
    return InstrumentFamily(members, "indicator-cells", labels)


def polynomial_family(z_dim: int, degree: int, coords: Sequence[int] | None = None) -> InstrumentFamily:
    """Monomials in the chosen coordinates up to ``degree``, graded order."""
    coords = list(range(z_dim)) if coords is None else list(coords)
    members: list[Scalar] = [_constant]
    labels = ["1"]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(coords, deg):
            members.append(lambda Z, c=combo: np.prod(Z[:, list(c)], axis=1))
            labels.append("*".join(f"z{c}" for c in combo))
    return InstrumentFamily(tuple(members), "polynomial", tuple(labels))


INSTRUMENT_FAMILIES = {
    "indicator-cells": {"schema": {}, "doc": "constant plus one indicator per support point (spans L2 exactly)"},
    "polynomial": {"schema": {"degree": 2, "coords": None}, "doc": "graded monomials in the chosen coordinates"},
}


def build_family(name: str, law: DiscreteLaw, **params) -> InstrumentFamily:
    if name == "indicator-cells":
        return default_family(law)
    if name == "polynomial":
        return polynomial_family(law.dim, int(params.get("degree", 2)), params.get("coords"))
    raise ContractViolation(f"unknown instrument family {name!r}; known: {sorted(INSTRUMENT_FAMILIES)}")


def projected_instrument(law: DiscreteLaw, family: InstrumentFamily, s: int,
                         cond_vars: Sequence[int]) -> CondTable:
    """E[w_s(Z) | Z[cond_vars]] per cell (``s`` is 1-based)."""
    if not 1 <= s <= len(family):
        raise ContractViolation(f"instrument index {s} outside 1..{len(family)}")
    return cond_expectation(law, family.members[s - 1], cond_vars)


def block_projection(law: DiscreteLaw, model: MomentModel, family: InstrumentFamily,
                     s: int, j: int) -> CondTable:
    return projected_instrument(law, family, s, model.blocks[j].cond_vars)


@dataclass(frozen=True, eq=False)
class StackedInstrumentMatrix:
    """Per support point, the (k p) x p matrix stacking k diagonal p x p blocks."""

    k: int
    dims: tuple[int, ...]
    diag: np.ndarray  # (S, k, p): diagonal of each p x p block

    def matrices(self) -> np.ndarray:
        S, k, p = self.diag.shape
        out = np.zeros((S, k * p, p))
        idx = np.arange(p)
        for s in range(k):
            out[:, s * p + idx, idx] = self.diag[:, s, :]
        return out

    def apply(self, gbar: np.ndarray) -> np.ndarray:
        """Stacked instrumented moments, (S, k p), from stacked moments (S, p)."""
        return (self.diag * gbar[:, None, :]).reshape(gbar.shape[0], -1)


def build_stacked(law: DiscreteLaw, model: MomentModel, family: InstrumentFamily, k: int) -> StackedInstrumentMatrix:
    if not 1 <= k <= len(family):
        raise ContractViolation(f"depth k={k} outside 1..{len(family)}")
    W = family.values(law.support, k)  # (S, k)
    cols = []
    for j, b in enumerate(model.blocks):
        part = law.partition(b.cond_vars)
        proj = part.expand(part.average(W))  # (S, k)
        cols.append(np.repeat(proj[:, :, None], b.output_dim, axis=2))
    return StackedInstrumentMatrix(k, tuple(model.dims), np.concatenate(cols, axis=2))
