"""Information of unconditional instrumented models and its limit in the depth k."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .instruments import InstrumentFamily, StackedInstrumentMatrix, build_stacked
from .model import MomentModel, MomentTables, moment_tables
from .numerics import pinv, sym
from .probability import DiscreteLaw
from .scorefield import ScoreField, score_from_coefs


class GMMInfo(NamedTuple):
    matrix: np.ndarray
    degenerate: bool


def _point_jacobians(tables: MomentTables) -> np.ndarray:
    """E[d g_j / d theta' | X^(j)] at each support point, stacked over blocks: (S, p, d)."""
    return np.concatenate([bt.jac[bt.labels] for bt in tables.blocks], axis=1)


def gmm_information(jacobian: np.ndarray, variance: np.ndarray) -> GMMInfo:
    """G' V^- G; a zero variance gives zero information flagged degenerate."""
    if not np.any(variance):
        d = jacobian.shape[1]
        return GMMInfo(np.zeros((d, d)), True)
    I = jacobian.T @ pinv(sym(variance)) @ jacobian
    return GMMInfo(sym(I), False)


def fisher_info_unconditional(model: MomentModel, law: DiscreteLaw, theta0,
                              stacked: StackedInstrumentMatrix,
                              tables: MomentTables | None = None) -> GMMInfo:
    """Information for E[w^(k)(X) g(Z, theta)] = 0 with exact moments.

    Instruments are held fixed; the Jacobian is the derivative of the
    unconditional expectation, assembled from the conditional Jacobians.
    """
    tables = tables or moment_tables(model, law, theta0)
    gbar = np.hstack([bt.g for bt in tables.blocks])
    gw = stacked.apply(gbar)                                   # (S, kp)
    V = np.einsum("s,si,sj->ij", law.probs, gw, gw)
    D = _point_jacobians(tables)                               # (S, p, d)
    S, k, p = stacked.diag.shape
    G = np.einsum("s,skp,spd->kpd", law.probs, stacked.diag, D).reshape(k * p, -1)
    return gmm_information(G, V)


@dataclass
class InfoBoundSequence:
    entries: list[tuple[int, np.ndarray]]
    converged_at: Optional[int] = None
    final_gap: float = float("nan")
    increments: list[float] = field(default_factory=list)
    stop_tol: float = 1e-10
    stop_rule: str = "two consecutive spectral-norm increments below stop_tol (artifact choice)"

    @property
    def final(self) -> np.ndarray:
        return self.entries[-1][1]

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"k": k, "information": I.tolist(), "increment": inc}
                for (k, I), inc in zip(self.entries, [None] + self.increments)
            ],
            "converged_at": self.converged_at,
            "final_gap": self.final_gap,
            "stop_tol": self.stop_tol,
            "stop_rule": self.stop_rule,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for idx, (k, I) in enumerate(self.entries):
            gap = self.increments[idx - 1] if idx else ""
            for r in range(I.shape[0]):
                for c in range(I.shape[1]):
                    rows.append({"k": k, "row": r, "col": c, "value": repr(float(I[r, c])), "increment": gap})
        return rows


def info_bound_sequence(model: MomentModel, law: DiscreteLaw, theta0, family: InstrumentFamily,
                        k_max: int | None = None, stop_tol: float = 1e-10,
                        early_stop: bool = True) -> InfoBoundSequence:
    """I^(k) for k = 1..k_max.

    ``converged_at`` is the first k where two consecutive spectral-norm
    increments fall below ``stop_tol``; with ``early_stop`` the computation
    ends there.
    """
    k_max = len(family) if k_max is None else int(k_max)
    if not 1 <= k_max <= len(family):
        raise ValueError(f"k_max must lie in 1..{len(family)}")
    tables = moment_tables(model, law, theta0)
    seq = InfoBoundSequence([], stop_tol=stop_tol)
    small = 0
    for k in range(1, k_max + 1):
        I = fisher_info_unconditional(model, law, theta0, build_stacked(law, model, family, k), tables).matrix
        if seq.entries:
            gap = float(np.linalg.norm(I - seq.entries[-1][1], 2))
            seq.increments.append(gap)
            small = small + 1 if gap < stop_tol else 0
            if small >= 2 and seq.converged_at is None:
                seq.converged_at = k
        seq.entries.append((k, I))
        if early_stop and seq.converged_at is not None:
            break
    seq.final_gap = seq.increments[-1] if seq.increments else float("nan")
    return seq


def info_for_instruments(model: MomentModel, law: DiscreteLaw, theta0, b: ScoreField,
                         tables: MomentTables | None = None) -> np.ndarray:
    """Information of the d moments E[sum_j b_j(X^(j)) g_j(Z, theta)] = 0."""
    tables = tables or moment_tables(model, law, theta0)
    coefs, _ = b.aligned(tables)
    m = score_from_coefs(tables, coefs)                       # (S, d)
    V = np.einsum("s,si,sj->ij", law.probs, m, m)
    G = sum(
        np.einsum("c,cdp,cpe->de", bt.partition.cell_probs, a, bt.jac)
        for bt, a in zip(tables.blocks, coefs)
    )
    return gmm_information(G, V).matrix
