"""Per-block instrument fields a_j(X^(j)) and the scores they induce."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .model import MomentTables


@dataclass(frozen=True, eq=False)
class ScoreField:
    """Instruments a_j, one d x p_j matrix per X^(j)-cell.

    ``keys[j]`` lists the cell values (lexicographic), ``coefs[j]`` has shape
    (cells, d, p_j). The induced score at z is sum_j a_j(x^(j)) g_j(z).
    """

    cond_vars: tuple[tuple[int, ...], ...]
    keys: tuple[np.ndarray, ...]
    coefs: tuple[np.ndarray, ...]
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.cond_vars) == len(self.keys) == len(self.coefs)):
            raise ContractViolation("cond_vars, keys and coefs must have one entry per block")
        for k, c in zip(self.keys, self.coefs):
            if c.ndim != 3 or c.shape[0] != k.shape[0]:
                raise ContractViolation("coefs[j] must have shape (cells, d, p_j)")
            if not np.all(np.isfinite(c)):
                raise ContractViolation("score field has non-finite entries")

    @property
    def n_blocks(self) -> int:
        return len(self.coefs)

    @property
    def d(self) -> int:
        return self.coefs[0].shape[1]

    @classmethod
    def from_tables(cls, tables: MomentTables, coefs: Sequence[np.ndarray], flags=None) -> "ScoreField":
        return cls(
            tuple(bt.partition.cond_vars for bt in tables.blocks),
            tuple(bt.partition.keys for bt in tables.blocks),
            tuple(np.array(c, dtype=float) for c in coefs),
            dict(flags or {}),
        )

    @classmethod
    def zeros(cls, tables: MomentTables) -> "ScoreField":
        d = tables.d
        return cls.from_tables(
            tables, [np.zeros((bt.partition.n_cells, d, bt.g.shape[1])) for bt in tables.blocks]
        )

    def block_only(self, j: int) -> "ScoreField":
        coefs = [c if i == j else np.zeros_like(c) for i, c in enumerate(self.coefs)]
        return ScoreField(self.cond_vars, self.keys, tuple(coefs), dict(self.flags))

    def lookup(self, j: int, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Coefficients for rows of x (values of block j's conditioning coordinates).

        Cells absent from the field fall back to the nearest populated cell
        (Euclidean, ties to the lexicographically smallest). Returns the
        (n, d, p_j) array and the number of rows that used the fallback.
        """
        keys = self.keys[j]
        x = np.asarray(x, dtype=float).reshape(-1, keys.shape[1])
        if keys.shape[1] == 0:
            return np.repeat(self.coefs[j][:1], x.shape[0], axis=0), 0
        index = {tuple(k): i for i, k in enumerate(keys.tolist())}
        idx = np.empty(x.shape[0], dtype=int)
        missed = 0
        for r, row in enumerate(x.tolist()):
            i = index.get(tuple(row))
            if i is None:
                missed += 1
                i = int(np.argmin(((keys - np.asarray(row)) ** 2).sum(axis=1)))
            idx[r] = i
        return self.coefs[j][idx], missed

    def aligned(self, tables: MomentTables) -> tuple[list[np.ndarray], int]:
        """Coefficient arrays aligned with the partitions of ``tables``."""
        out = []
        missed = 0
        for j, bt in enumerate(tables.blocks):
            if bt.partition.cond_vars != self.cond_vars[j]:
                raise ContractViolation(f"block {j}: field conditions on {self.cond_vars[j]}, model on {bt.partition.cond_vars}")
            k = self.keys[j]
            if k.shape == bt.partition.keys.shape and np.array_equal(k, bt.partition.keys):
                out.append(self.coefs[j])
            else:
                c, m = self.lookup(j, bt.partition.keys)
                out.append(c)
                missed += m
        return out, missed

    def score(self, tables: MomentTables) -> np.ndarray:
        """Score values at the support points of ``tables.law``: (S, d)."""
        coefs, _ = self.aligned(tables)
        return score_from_coefs(tables, coefs)

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "cond_vars": list(cv),
                    "cells": [
                        {"cell": list(map(float, k)), "coef": c.tolist()}
                        for k, c in zip(keys.tolist(), coefs)
                    ],
                }
                for cv, keys, coefs in zip(self.cond_vars, self.keys, self.coefs)
            ],
            "flags": {k: v for k, v in self.flags.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreField":
        cvs, keys, coefs = [], [], []
        for b in data["blocks"]:
            cv = tuple(int(c) for c in b["cond_vars"])
            cvs.append(cv)
            keys.append(np.array([c["cell"] for c in b["cells"]], dtype=float).reshape(-1, len(cv)))
            coefs.append(np.array([c["coef"] for c in b["cells"]], dtype=float))
        return cls(tuple(cvs), tuple(keys), tuple(coefs), dict(data.get("flags", {})))


def score_from_coefs(tables: MomentTables, coefs: Sequence[np.ndarray]) -> np.ndarray:
    S = tables.law.size
    out = np.zeros((S, tables.d))
    for bt, a in zip(tables.blocks, coefs):
        out += np.einsum("sdp,sp->sd", a[bt.labels], bt.g)
    return out


def l2_norm(law, values: np.ndarray) -> float:
    """L2(P0) norm of a vector-valued function given at the support points."""
    v = np.asarray(values, dtype=float).reshape(law.size, -1)
    return float(np.sqrt(np.dot(law.probs, (v ** 2).sum(axis=1))))


def second_moment(law, values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float).reshape(law.size, -1)
    M = np.einsum("s,si,sj->ij", law.probs, v, v)
    return 0.5 * (M + M.T)
