"""Efficient score for several conditional restrictions.

Three independent routes to the projection of the parametric score on the
closed span of {a_j(X^(j)) g_j}:

* ``backfit_solve``: alternating projections, block by block;
* ``oracle_projection``: the normal equations assembled as one linear system
  over all cell coefficients and solved by minimum-norm least squares;
* ``sequential_closed_form``: explicit instruments when the conditioning
  sigma-fields are nested (two blocks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .model import MomentModel, MomentTables, moment_tables
from .numerics import sym
from .probability import DiscreteLaw
from .scorefield import ScoreField, l2_norm, second_moment


def _tables(model, law, theta0, tables):
    return tables if tables is not None else moment_tables(model, law, theta0)


def _driving(bt) -> np.ndarray:
    """-E(d g_j' / d theta | X^(j)) V^-(g_j | X^(j)), shape (cells, d, p_j)."""
    return -np.einsum("cpd,cpq->cdq", bt.jac, bt.var_pinv)


def _block_update(tables: MomentTables, coefs: list[np.ndarray], j: int) -> np.ndarray:
    """Coefficient of the projection of S - sum_{i != j} a_i g_i on {a(X^(j)) g_j}."""
    bt = tables.blocks[j]
    out = _driving(bt)
    for i, (bi, a) in enumerate(zip(tables.blocks, coefs)):
        if i == j:
            continue
        h = np.einsum("sdp,sp->sd", a[bi.labels], bi.g)
        cross = bt.partition.average(h[:, :, None] * bt.g[:, None, :])
        out = out - np.einsum("cdp,cpq->cdq", cross, bt.var_pinv)
    return out


def rho_projection(model: MomentModel, law: DiscreteLaw, theta0, j: int,
                   tables: MomentTables | None = None) -> ScoreField:
    """Single-equation optimal instrument for block j; other blocks zero."""
    tables = _tables(model, law, theta0, tables)
    coefs = [np.zeros((bt.partition.n_cells, tables.d, bt.g.shape[1])) for bt in tables.blocks]
    bt = tables.blocks[j]
    coefs[j] = _driving(bt)
    flags = {}
    if bt.singular.any():
        flags["singular_variance_cells"] = bt.partition.keys[bt.singular].tolist()
    if not np.any(bt.g):
        flags["degenerate"] = True
    return ScoreField.from_tables(tables, coefs, flags)


def backfit_step(model: MomentModel, law: DiscreteLaw, theta0, prev: ScoreField,
                 tables: MomentTables | None = None) -> ScoreField:
    """One sweep m -> m+1 starting from the block-1 instrument of ``prev``.

    Blocks 2..J are first refreshed against prev's block 1 (for two blocks
    this is exactly a_2^(m-1)), then blocks 1..J are updated in order, each
    using the latest values of the others.
    """
    tables = _tables(model, law, theta0, tables)
    coefs, _ = prev.aligned(tables)
    coefs = [np.array(c, dtype=float) for c in coefs]
    _sweep(tables, coefs, refresh=True)
    return ScoreField.from_tables(tables, coefs)


def _sweep(tables, coefs, refresh):
    J = len(coefs)
    if refresh:
        for j in range(1, J):
            coefs[j] = _block_update(tables, coefs, j)
    for j in range(J):
        coefs[j] = _block_update(tables, coefs, j)


@dataclass
class BackfitTrace:
    iterates: list[tuple[int, float]] = field(default_factory=list)
    block_increments: list[list[float]] = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    tol: float = 1e-10

    @property
    def norms(self) -> list[float]:
        return [n for _, n in self.iterates]

    def to_dict(self) -> dict:
        return {
            "iterates": [{"m": m, "increment": n} for m, n in self.iterates],
            "block_increments": self.block_increments,
            "converged": self.converged,
            "iterations_used": self.iterations_used,
            "tol": self.tol,
        }

    def csv_rows(self) -> list[dict]:
        return [
            {"m": m, "increment": repr(n), **{f"block{j + 1}": repr(b) for j, b in enumerate(bi)}}
            for (m, n), bi in zip(self.iterates, self.block_increments)
        ]


def backfit_solve(model: MomentModel, law: DiscreteLaw, theta0, tol: float = 1e-10,
                  max_iter: int = 500, tables: MomentTables | None = None):
    """Iterate sweeps from a_1 = 0 until the score increment is below ``tol``.

    Convergence is judged on the summed score only; the individual block
    terms need not converge and their increments are just recorded.
    Returns ``(field, trace)``; hitting ``max_iter`` is reported, not raised.
    """
    if not tol > 0:
        raise ContractViolation("tol must be positive")
    tables = _tables(model, law, theta0, tables)
    J = len(tables.blocks)
    coefs = [np.zeros((bt.partition.n_cells, tables.d, bt.g.shape[1])) for bt in tables.blocks]
    terms_prev = [np.zeros((law.size, tables.d)) for _ in range(J)]
    trace = BackfitTrace(tol=tol)
    for m in range(1, max_iter + 1):
        _sweep(tables, coefs, refresh=(m == 1))
        terms = [np.einsum("sdp,sp->sd", a[bt.labels], bt.g) for a, bt in zip(coefs, tables.blocks)]
        inc = l2_norm(law, sum(terms) - sum(terms_prev))
        trace.iterates.append((m, inc))
        trace.block_increments.append([l2_norm(law, t - tp) for t, tp in zip(terms, terms_prev)])
        terms_prev = terms
        trace.iterations_used = m
        if inc < tol:
            trace.converged = True
            break
    flags = {"experimental_cyclic": J > 2} if J > 2 else {}
    return ScoreField.from_tables(tables, coefs, flags), trace


def oracle_projection(model: MomentModel, law: DiscreteLaw, theta0,
                      tables: MomentTables | None = None, rcond: float = 1e-12) -> ScoreField:
    """Solve the normal equations E[(S_bar - S) g_j' | X^(j)] = 0 for all j at once.

    Unknowns are the entries of every a_j on every cell; the system matrix
    is the Gram matrix of the functions 1{X^(j) = c} g_{j,l}, and
    E[S g_j' | X^(j)] = -E(d g_j / d theta' | X^(j))'. The minimum-norm
    least-squares solution is returned.
    """
    tables = _tables(model, law, theta0, tables)
    d = tables.d
    cols, rhs, shapes = [], [], []
    for bt in tables.blocks:
        n_c, p = bt.partition.n_cells, bt.g.shape[1]
        shapes.append((n_c, p))
        onehot = np.zeros((law.size, n_c))
        onehot[np.arange(law.size), bt.labels] = 1.0
        cols.append((onehot[:, :, None] * bt.g[:, None, :]).reshape(law.size, n_c * p))
        rhs.append((-bt.partition.cell_probs[:, None, None] * bt.jac).reshape(n_c * p, d))
    Phi = np.hstack(cols)
    G = Phi.T @ (law.probs[:, None] * Phi)
    B = np.vstack(rhs)
    A, *_ = np.linalg.lstsq(sym(G), B, rcond=rcond)
    coefs, start = [], 0
    for n_c, p in shapes:
        block = A[start:start + n_c * p].reshape(n_c, p, d)
        coefs.append(np.transpose(block, (0, 2, 1)))
        start += n_c * p
    return ScoreField.from_tables(tables, coefs, {"method": "min-norm least squares"})


def normal_equation_residual(model: MomentModel, law: DiscreteLaw, theta0, fld: ScoreField,
                  tables: MomentTables | None = None) -> list[float]:
    """L2 norm, per block, of a_j g_j minus the right-hand side of the fixed-point system."""
    tables = _tables(model, law, theta0, tables)
    coefs, _ = fld.aligned(tables)
    out = []
    for j, bt in enumerate(tables.blocks):
        diff = coefs[j] - _block_update(tables, coefs, j)
        out.append(l2_norm(law, np.einsum("sdp,sp->sd", diff[bt.labels], bt.g)))
    return out


@dataclass
class SequentialSolution:
    field: ScoreField
    a1_tilde: np.ndarray        # (X1-cells, d, p1)
    a2_tilde: np.ndarray        # (X2-cells, d, p2)
    projection: np.ndarray      # (X2-cells, p1, p2): E(g1 g2'|X2) V^-1(g2|X2)
    g1_tilde: np.ndarray        # (S, p1)
    parent: np.ndarray          # X1-cell of each X2-cell


def nesting_map(tables: MomentTables) -> np.ndarray:
    """X^(1)-cell of each X^(2)-cell; raises if sigma(X1) is not inside sigma(X2)."""
    b1, b2 = tables.blocks[0], tables.blocks[1]
    parent = np.full(b2.partition.n_cells, -1)
    for s in range(tables.law.size):
        c2, c1 = b2.labels[s], b1.labels[s]
        if parent[c2] == -1:
            parent[c2] = c1
        elif parent[c2] != c1:
            raise ContractViolation(
                "conditioning sets are not nested: X2-cell "
                f"{b2.partition.keys[c2].tolist()} meets X1-cells "
                f"{b1.partition.keys[parent[c2]].tolist()} and {b1.partition.keys[c1].tolist()}"
            )
    return parent


def sequential_closed_form(model: MomentModel, law: DiscreteLaw, theta0,
                           tables: MomentTables | None = None) -> SequentialSolution:
    """Explicit efficient instruments when sigma(X^(1)) is contained in sigma(X^(2)).

    Block 1 is replaced by its residual after projecting on g_2 given X^(2),
    which decouples the two blocks; the result is also expressed on the
    original blocks.
    """
    tables = _tables(model, law, theta0, tables)
    if len(tables.blocks) != 2:
        raise ContractViolation("the sequential closed form is defined for two blocks")
    b1, b2 = tables.blocks
    parent = nesting_map(tables)
    if b2.singular.any():
        raise ContractViolation(
            f"V(g2 | X2) is singular on cells {b2.partition.keys[b2.singular].tolist()}"
        )
    V2inv = np.linalg.inv(b2.var)
    cross = b2.partition.average(b1.g[:, :, None] * b2.g[:, None, :])       # (c2, p1, p2)
    C = np.einsum("cpq,cqr->cpr", cross, V2inv)
    g1t = b1.g - np.einsum("spq,sq->sp", C[b2.labels], b2.g)
    part1 = b1.partition
    mean = part1.average(g1t)
    var1 = part1.average(g1t[:, :, None] * g1t[:, None, :]) - mean[:, :, None] * mean[:, None, :]
    var1_pinv = np.linalg.pinv(sym(var1), rcond=1e-12)
    jac1t = b1.jac - part1.average(np.einsum("spq,sqd->spd", C[b2.labels], b2.jac[b2.labels]))
    a1t = -np.einsum("cpd,cpq->cdq", jac1t, var1_pinv)
    a2t = -np.einsum("cpd,cpq->cdq", b2.jac, V2inv)
    a2 = a2t - np.einsum("cdp,cpq->cdq", a1t[parent], C)
    fld = ScoreField.from_tables(tables, [a1t, a2], {"method": "sequential closed form"})
    return SequentialSolution(fld, a1t, a2t, C, g1t, parent)


def chamberlain_score(model: MomentModel, law: DiscreteLaw, theta0,
                      tables: MomentTables | None = None) -> np.ndarray:
    """-E(d g'/d theta | X) V^-1(g | X) g for blocks sharing one conditioning set; (S, d)."""
    tables = _tables(model, law, theta0, tables)
    cvs = {bt.partition.cond_vars for bt in tables.blocks}
    if len(cvs) != 1:
        raise ContractViolation("all blocks must share the same conditioning coordinates")
    part = tables.blocks[0].partition
    g = np.hstack([bt.g for bt in tables.blocks])
    jac = np.concatenate([bt.jac for bt in tables.blocks], axis=1)
    mean = part.average(g)
    V = part.average(g[:, :, None] * g[:, None, :]) - mean[:, :, None] * mean[:, None, :]
    try:
        Vinv = np.linalg.inv(sym(V))
    except np.linalg.LinAlgError as exc:
        raise ContractViolation(f"V(g | X) is singular: {exc}") from exc
    coef = -np.einsum("cpd,cpq->cdq", jac, Vinv)
    return np.einsum("sdp,sp->sd", coef[part.labels], g)


def efficient_information(law: DiscreteLaw, model: MomentModel, theta0, fld: ScoreField,
                          tables: MomentTables | None = None) -> np.ndarray:
    """E[S_bar S_bar'] for the score induced by ``fld``."""
    tables = _tables(model, law, theta0, tables)
    return second_moment(law, fld.score(tables))


def score_distance(law: DiscreteLaw, model: MomentModel, theta0, f1: ScoreField, f2: ScoreField,
                   tables: MomentTables | None = None) -> float:
    tables = _tables(model, law, theta0, tables)
    return l2_norm(law, f1.score(tables) - f2.score(tables))
