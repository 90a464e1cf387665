"""Moment models: blocks g_j(Z, theta) with their conditioning coordinates.

A block is evaluated vectorised over rows of Z. Built-in families live in
``BLOCK_FAMILIES`` and can be constructed by name from a config document;
arbitrary moment functions enter through :class:`MomentBlock` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .numerics import DEFAULT_REL_TOL, fd_derivative, pinv_stack
from .probability import CondTable, DiscreteLaw, Partition

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]

RESTRICTION_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MomentBlock:
    """One conditional restriction E[g(Z, theta) | Z[cond_vars]] = 0.

    ``evaluator(Z, theta)`` maps an (n, q) array to (n, output_dim).
    ``jacobian(Z, theta)``, when given, returns the pointwise derivative
    with shape (n, output_dim, d).
    """

    output_dim: int
    cond_vars: tuple[int, ...]
    evaluator: Evaluator
    jacobian: Optional[Evaluator] = None
    smooth: bool = True
    family: str = "custom"
    params: dict = field(default_factory=dict)
    selection: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.output_dim < 1:
            raise ContractViolation("block output_dim must be >= 1")
        object.__setattr__(self, "cond_vars", tuple(int(c) for c in self.cond_vars))

    def __call__(self, Z: np.ndarray, theta) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.asarray(self.evaluator(Z, np.asarray(theta, dtype=float)), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (Z.shape[0], self.output_dim):
            raise ContractViolation(
                f"{self.family} block returned shape {out.shape}, expected {(Z.shape[0], self.output_dim)}"
            )
        return out


@dataclass(frozen=True, eq=False)
class MomentModel:
    blocks: tuple[MomentBlock, ...]
    param_dim: int
    z_dim: int
    theta0: Optional[np.ndarray] = None
    jacobian_mode: str = "analytic"
    law: Optional[DiscreteLaw] = None
    name: str = "custom"

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ContractViolation("a model needs at least one block")
        if self.param_dim < 1:
            raise ContractViolation("param_dim must be >= 1")
        if self.jacobian_mode not in ("analytic", "fd"):
            raise ContractViolation(f"unknown jacobian_mode {self.jacobian_mode!r}")
        for j, b in enumerate(blocks):
            for c in b.cond_vars:
                if not 0 <= c < self.z_dim:
                    raise ContractViolation(f"block {j}: conditioning coordinate {c} outside 0..{self.z_dim - 1}")
            if self.jacobian_mode == "analytic" and (not b.smooth or b.jacobian is None):
                raise ContractViolation(
                    f"block {j} ({b.family}) has no analytic derivative; use jacobian_mode='fd'"
                )
        if self.theta0 is not None:
            t0 = np.asarray(self.theta0, dtype=float).ravel()
            if t0.size != self.param_dim or not np.all(np.isfinite(t0)):
                raise ContractViolation(f"theta0 must be a finite vector of length {self.param_dim}")
            object.__setattr__(self, "theta0", t0)
        if self.law is not None:
            if self.law.dim != self.z_dim:
                raise ContractViolation(f"law has {self.law.dim} coordinates, model expects {self.z_dim}")
            if self.theta0 is not None:
                resid = restriction_residual(self, self.law, self.theta0)
                if resid > RESTRICTION_TOL:
                    raise ContractViolation(
                        f"theta0 violates the conditional restrictions under the law (max residual {resid:.3e})"
                    )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> list[int]:
        return [b.output_dim for b in self.blocks]

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def with_mode(self, mode: str) -> "MomentModel":
        return MomentModel(self.blocks, self.param_dim, self.z_dim, self.theta0, mode, None, self.name)


def _theta(model: MomentModel, theta) -> np.ndarray:
    if theta is None:
        if model.theta0 is None:
            raise ContractViolation("no theta given and the model has no theta0")
        return model.theta0
    t = np.asarray(theta, dtype=float).ravel()
    if t.size != model.param_dim or not np.all(np.isfinite(t)):
        raise ContractViolation(f"theta must be a finite vector of length {model.param_dim}")
    return t


def block_values(model: MomentModel, j: int, Z: np.ndarray, theta) -> np.ndarray:
    try:
        return model.blocks[j](Z, _theta(model, theta))
    except ContractViolation:
        raise
    except Exception as exc:  # evaluator bug: attach the block index
        raise RuntimeError(f"block {j} evaluation failed: {exc}") from exc


def stack_moments(model: MomentModel, z, theta) -> np.ndarray:
    """(g_1', ..., g_J')' at a point z (length p) or at each row of z (n, p)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    out = np.hstack([block_values(model, j, Z, theta) for j in range(model.n_blocks)])
    return out[0] if single else out


def restriction_residual(model: MomentModel, law: DiscreteLaw, theta=None) -> float:
    """max over blocks and cells of |E[g_j(Z, theta) | X^(j)]|."""
    t = _theta(model, theta)
    worst = 0.0
    for j, b in enumerate(model.blocks):
        part = law.partition(b.cond_vars)
        m = part.average(block_values(model, j, law.support, t))
        worst = max(worst, float(np.abs(m).max()))
    return worst


def block_conditional_jacobian(model: MomentModel, law: DiscreteLaw, j: int, theta=None,
                               mode: str | None = None) -> CondTable:
    """Cellwise derivative of theta -> E[g_j(Z, theta) | X^(j)], shape (cells, p_j, d).

    Finite-difference mode differentiates the exact conditional expectation,
    never the pointwise moment function.
    """
    t = _theta(model, theta)
    mode = mode or model.jacobian_mode
    block = model.blocks[j]
    part = law.partition(block.cond_vars)
    if mode == "analytic":
        if block.jacobian is None or not block.smooth:
            raise ContractViolation(f"block {j} ({block.family}) has no analytic derivative")
        jac = np.asarray(block.jacobian(law.support, t), dtype=float)
        return CondTable(part, part.average(jac))
    if mode != "fd":
        raise ContractViolation(f"unknown jacobian mode {mode!r}")
    cols = fd_derivative(lambda th: part.average(block(law.support, th)), t)
    return CondTable(part, np.stack(cols, axis=-1))


def marginal_jacobian(model: MomentModel, law: DiscreteLaw, j: int, theta=None) -> np.ndarray:
    """d/dtheta' E[g_j(Z, theta)], shape (p_j, d)."""
    tab = block_conditional_jacobian(model, law, j, theta)
    return np.tensordot(tab.partition.cell_probs, tab.values, axes=(0, 0))


def _singular(mats: np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Per-matrix singular flag and condition number."""
    sv = np.linalg.svd(mats, compute_uv=False)
    smax = sv[:, 0]
    smin = sv[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(smin > 0, smax / np.where(smin > 0, smin, 1.0), np.inf)
    flag = (smax <= 0) | (smin <= rel_tol * smax)
    return flag, cond


@dataclass(frozen=True, eq=False)
class BlockTables:
    """Exact per-cell quantities of one block at a fixed theta."""

    partition: Partition
    g: np.ndarray          # (S, p_j) values at support points
    jac: np.ndarray        # (cells, p_j, d)  E[d g / d theta' | cell]
    var: np.ndarray        # (cells, p_j, p_j) V(g | cell)
    var_pinv: np.ndarray   # (cells, p_j, p_j)
    singular: np.ndarray   # (cells,) bool

    @property
    def labels(self) -> np.ndarray:
        return self.partition.labels


@dataclass(frozen=True, eq=False)
class MomentTables:
    model: MomentModel
    law: DiscreteLaw
    theta: np.ndarray
    blocks: tuple[BlockTables, ...]

    @property
    def d(self) -> int:
        return self.model.param_dim


def moment_tables(model: MomentModel, law: DiscreteLaw, theta=None) -> MomentTables:
    t = _theta(model, theta)
    out = []
    for j, b in enumerate(model.blocks):
        part = law.partition(b.cond_vars)
        g = block_values(model, j, law.support, t)
        mean = part.average(g)
        second = part.average(g[:, :, None] * g[:, None, :])
        var = second - mean[:, :, None] * mean[:, None, :]
        var = 0.5 * (var + np.swapaxes(var, 1, 2))
        jac = block_conditional_jacobian(model, law, j, t).values
        flag, _ = _singular(var)
        out.append(BlockTables(part, g, jac, var, pinv_stack(var), flag))
    return MomentTables(model, law, t, tuple(out))


# --------------------------------------------------------------------------
# Diagnostics


@dataclass
class BlockDiagnostics:
    var_sup_norm: float
    condition_numbers: list[float]
    singular_cells: list[list[float]]
    info_nonsingular: bool
    info_min_eig: float


@dataclass
class DiagnosticsReport:
    blocks: list[BlockDiagnostics]
    joint_second_moment_invertible: bool
    joint_singular_cells: list[list[float]]
    restriction_residual: float
    beta: Optional[float] = None
    weights_bounded: Optional[bool] = None

    @property
    def passed(self) -> bool:
        ok = self.joint_second_moment_invertible and all(
            not b.singular_cells and b.info_nonsingular for b in self.blocks
        )
        if self.weights_bounded is not None:
            ok = ok and self.weights_bounded
        return ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "blocks": [vars(b) for b in self.blocks],
            "joint_second_moment_invertible": self.joint_second_moment_invertible,
            "joint_singular_cells": self.joint_singular_cells,
            "restriction_residual": self.restriction_residual,
            "beta": self.beta,
            "weights_bounded": self.weights_bounded,
        }


def check_assumptions(model: MomentModel, law: DiscreteLaw, theta0=None) -> DiagnosticsReport:
    """Finite-support checks of the boundedness / nonsingularity conditions.

    Never raises on a failing condition; failures are reported as flags.
    """
    tables = moment_tables(model, law, theta0)
    blocks = []
    for bt in tables.blocks:
        _, cond = _singular(bt.var)
        info = np.einsum("c,cpd,cpq,cqe->de", bt.partition.cell_probs, bt.jac, bt.var_pinv, bt.jac)
        eig = float(np.linalg.eigvalsh(0.5 * (info + info.T))[0])
        scale = max(1.0, float(np.abs(info).max()))
        blocks.append(BlockDiagnostics(
            var_sup_norm=float(np.abs(bt.var).max()),
            condition_numbers=[float(c) for c in cond],
            singular_cells=bt.partition.keys[bt.singular].tolist(),
            info_nonsingular=eig > 1e-10 * scale,
            info_min_eig=eig,
        ))

    union = sorted({c for b in model.blocks for c in b.cond_vars})
    joint = law.partition(union)
    joint_bad = np.zeros(joint.n_cells, dtype=bool)
    for bt in tables.blocks:
        second = joint.average(bt.g[:, :, None] * bt.g[:, None, :])
        flag, _ = _singular(second)
        joint_bad |= flag

    beta = bounded = None
    sel = [b.selection for b in model.blocks if b.selection is not None]
    if sel:
        pis = np.concatenate([np.asarray(s(law.support), dtype=float).ravel() for s in sel])
        beta = float(np.max(1.0 - pis))
        bounded = bool(beta < 1.0)

    return DiagnosticsReport(
        blocks=blocks,
        joint_second_moment_invertible=not joint_bad.any(),
        joint_singular_cells=joint.keys[joint_bad].tolist(),
        restriction_residual=restriction_residual(model, law, tables.theta),
        beta=beta,
        weights_bounded=bounded,
    )


# --------------------------------------------------------------------------
# Built-in block families


def design(Z: np.ndarray, regressors: Sequence) -> np.ndarray:
    """Columns of x(Z) paired with theta: None -> 0, "1" -> 1, int -> Z[:, int]."""
    cols = []
    for r in regressors:
        if r is None:
            cols.append(np.zeros(Z.shape[0]))
        elif isinstance(r, str) and r == "1":
            cols.append(np.ones(Z.shape[0]))
        else:
            cols.append(Z[:, int(r)])
    return np.column_stack(cols) if cols else np.zeros((Z.shape[0], 0))


def _check_regressors(regressors):
    for r in regressors:
        if not (r is None or (isinstance(r, str) and r == "1") or (isinstance(r, (int, np.integer)) and not isinstance(r, bool) and r >= 0)):
            raise ContractViolation(f"regressor entries must be null, \"1\" or a coordinate index, got {r!r}")


def linear_block(y: int, regressors: Sequence, cond_vars: Sequence[int] = ()) -> MomentBlock:
    """Mean-regression residual Y - x'theta."""
    _check_regressors(regressors)
    regressors = list(regressors)

    def g(Z, theta):
        return Z[:, y] - design(Z, regressors) @ theta

    def jac(Z, theta):
        return -design(Z, regressors)[:, None, :]

    return MomentBlock(1, tuple(cond_vars), g, jac, True, "linear",
                       {"y": y, "regressors": regressors})


_LINKS = {
    "identity": (lambda u: u, lambda u: np.ones_like(u)),
    "exp": (np.exp, np.exp),
    "logistic": (lambda u: 1.0 / (1.0 + np.exp(-u)),
                 lambda u: np.exp(-u) / (1.0 + np.exp(-u)) ** 2),
    "square": (lambda u: u ** 2, lambda u: 2 * u),
}


def separable_block(y: int, regressors: Sequence, cond_vars: Sequence[int] = (),
                    link: str = "exp") -> MomentBlock:
    """Residual Y - m(x'theta) with m from a small fixed set of links."""
    _check_regressors(regressors)
    if link not in _LINKS:
        raise ContractViolation(f"unknown link {link!r}; choose from {sorted(_LINKS)}")
    m, dm = _LINKS[link]
    regressors = list(regressors)

    def g(Z, theta):
        return Z[:, y] - m(design(Z, regressors) @ theta)

    def jac(Z, theta):
        X = design(Z, regressors)
        return -(dm(X @ theta)[:, None] * X)[:, None, :]

    return MomentBlock(1, tuple(cond_vars), g, jac, True, "separable",
                       {"y": y, "regressors": regressors, "link": link})


def quantile_block(y: int, regressors: Sequence, cond_vars: Sequence[int] = (),
                   tau: float = 0.5, bandwidth: float = 1.0) -> MomentBlock:
    """Quantile residual tau - 1{Y <= x'theta}.

    Each support value of Y stands for a bin of width ``bandwidth`` with
    uniform mass, and the residual is averaged over that bin, so the exact
    conditional expectation is piecewise linear in theta with slope equal
    to minus the conditional density. ``bandwidth=0`` gives the raw
    indicator. No analytic derivative is registered.
    """
    _check_regressors(regressors)
    if not 0 < tau < 1:
        raise ContractViolation("tau must lie in (0, 1)")
    if bandwidth < 0:
        raise ContractViolation("bandwidth must be >= 0")
    regressors = list(regressors)

    def g(Z, theta):
        u = design(Z, regressors) @ theta
        if bandwidth == 0:
            F = (Z[:, y] <= u).astype(float)
        else:
            F = np.clip((u - Z[:, y]) / bandwidth + 0.5, 0.0, 1.0)
        return tau - F

    return MomentBlock(1, tuple(cond_vars), g, None, False, "quantile",
                       {"y": y, "regressors": regressors, "tau": tau, "bandwidth": bandwidth})


BLOCK_FAMILIES: dict[str, dict[str, Any]] = {
    "linear": {
        "builder": linear_block,
        "schema": {"y": 0, "regressors": ["1"], "cond_vars": []},
        "doc": "Y - x'theta; regressors: list (length d) of null | \"1\" | coordinate",
    },
    "separable": {
        "builder": separable_block,
        "schema": {"y": 0, "regressors": ["1"], "cond_vars": [], "link": "exp"},
        "doc": "Y - m(x'theta), link in " + ", ".join(sorted(_LINKS)),
    },
    "quantile": {
        "builder": quantile_block,
        "schema": {"y": 0, "regressors": ["1"], "cond_vars": [], "tau": 0.5, "bandwidth": 1.0},
        "doc": "tau - 1{Y <= x'theta}, bin-averaged over width bandwidth; fd Jacobian only",
    },
}


def build_block(family: str, **params) -> MomentBlock:
    try:
        entry = BLOCK_FAMILIES[family]
    except KeyError:
        raise ContractViolation(f"unknown block family {family!r}; known: {sorted(BLOCK_FAMILIES)}") from None
    return entry["builder"](**params)
