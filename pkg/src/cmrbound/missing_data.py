"""Regression-type moments with data missing at random given W.

The full-data restriction E[rho(Y, X*, alpha) | X*] = 0 is observed only when
delta = 1, with P(delta = 1 | Y, X*, W) = pi(W). At the observational level
this becomes two blocks

    g1 = delta / pi(W) * rho     given X*,
    g2 = delta / pi(W) - 1       given W,

and the efficient instrument for g1 solves a linear equation whose map is a
contraction with factor beta = sup(1 - pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .model import MomentBlock, MomentModel, design, moment_tables
from .probability import DiscreteLaw, weighted_law
from .scorefield import ScoreField, l2_norm

VARIANTS = ("missing-response", "missing-regressor")


@dataclass(frozen=True, eq=False)
class SelectionModel:
    """pi(W) as a finite table or as logistic(features(W)' gamma)."""

    kind: str
    w_coords: tuple[int, ...]
    table: Optional[dict[tuple[float, ...], float]] = None
    features: tuple = ()
    gamma0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "w_coords", tuple(int(c) for c in self.w_coords))
        if self.kind == "table":
            if not self.table:
                raise ContractViolation("table selection needs at least one entry")
            tab = {}
            for key, p in self.table.items():
                key = tuple(float(k) for k in np.atleast_1d(key))
                if len(key) != len(self.w_coords):
                    raise ContractViolation(f"selection cell {key} does not match W coordinates {self.w_coords}")
                if not 0 < p <= 1:
                    raise ContractViolation(f"selection probability {p} at W-cell {key} outside (0, 1]")
                tab[key] = float(p)
            object.__setattr__(self, "table", tab)
            object.__setattr__(self, "gamma0", np.zeros(0))
        elif self.kind == "logistic":
            g0 = np.asarray(self.gamma0, dtype=float).ravel()
            if g0.size != len(self.features) or g0.size == 0:
                raise ContractViolation("logistic selection needs one gamma0 entry per feature")
            object.__setattr__(self, "gamma0", g0)
            object.__setattr__(self, "features", tuple(self.features))
        else:
            raise ContractViolation(f"unknown selection family {self.kind!r}; known: {sorted(SELECTION_FAMILIES)}")

    @property
    def n_params(self) -> int:
        return self.gamma0.size

    def _gamma(self, gamma):
        return self.gamma0 if gamma is None else np.asarray(gamma, dtype=float).ravel()

    def prob(self, Z: np.ndarray, gamma=None) -> np.ndarray:
        Z = np.atleast_2d(Z)
        if self.kind == "table":
            W = Z[:, list(self.w_coords)]
            out = np.full(Z.shape[0], np.nan)
            for key, p in self.table.items():
                out[np.all(W == np.asarray(key), axis=1)] = p
            if np.isnan(out).any():
                bad = W[np.isnan(out)][0].tolist()
                raise ContractViolation(f"selection table has no entry for W-cell {bad}")
            return out
        u = design(Z, self.features) @ self._gamma(gamma)
        return 1.0 / (1.0 + np.exp(-u))

    def grad(self, Z: np.ndarray, gamma=None) -> np.ndarray:
        """d pi / d gamma', shape (n, n_params)."""
        Z = np.atleast_2d(Z)
        if self.kind == "table":
            return np.zeros((Z.shape[0], 0))
        p = self.prob(Z, gamma)
        return (p * (1 - p))[:, None] * design(Z, self.features)

    def to_dict(self) -> dict:
        if self.kind == "table":
            return {"family": "table", "w_coords": list(self.w_coords),
                    "values": [list(k) + [p] for k, p in self.table.items()]}
        return {"family": "logistic", "w_coords": list(self.w_coords),
                "features": list(self.features), "gamma0": self.gamma0.tolist()}


def table_selection(w_coords: Sequence[int], values: Sequence[Sequence[float]]) -> SelectionModel:
    """``values`` rows are (w_1, ..., w_m, pi)."""
    tab = {tuple(v[:-1]): float(v[-1]) for v in values}
    return SelectionModel("table", tuple(w_coords), tab)


def logistic_selection(w_coords: Sequence[int], features: Sequence, gamma0: Sequence[float]) -> SelectionModel:
    for f in features:
        if not (f == "1" or (isinstance(f, int) and int(f) in set(w_coords))):
            raise ContractViolation(f"logistic feature {f!r} must be \"1\" or one of the W coordinates {list(w_coords)}")
    return SelectionModel("logistic", tuple(w_coords), None, tuple(features), np.asarray(gamma0, dtype=float))


SELECTION_FAMILIES: dict[str, dict[str, Any]] = {
    "table": {
        "builder": table_selection,
        "schema": {"w_coords": [3], "values": [[0, 0.5], [1, 0.8]]},
        "doc": "known pi given as rows (w..., pi) over the W-cells",
    },
    "logistic": {
        "builder": logistic_selection,
        "schema": {"w_coords": [3], "features": ["1", 3], "gamma0": [0.0, 1.3862943611198906]},
        "doc": "pi = 1 / (1 + exp(-features(W)' gamma)), gamma estimated jointly",
    },
}


def build_selection(family: str, **params) -> SelectionModel:
    try:
        return SELECTION_FAMILIES[family]["builder"](**params)
    except KeyError:
        raise ContractViolation(f"unknown selection family {family!r}; known: {sorted(SELECTION_FAMILIES)}") from None


@dataclass(frozen=True, eq=False)
class MissingDataSpec:
    """Full-data residual ``rho`` (conditioned on X* = rho.cond_vars), the
    missingness indicator coordinate and the selection model."""

    variant: str
    rho: MomentBlock
    selection: SelectionModel
    alpha0: np.ndarray
    delta_coord: int
    z_dim: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "alpha0", np.asarray(self.alpha0, dtype=float).ravel())
        if self.variant == "missing-response" and not set(self.x_star) <= set(self.selection.w_coords):
            raise ContractViolation("missing-response needs the X* coordinates inside W")
        if self.delta_coord in self.selection.w_coords or self.delta_coord in self.x_star:
            raise ContractViolation("delta cannot be a conditioning coordinate")

    @property
    def x_star(self) -> tuple[int, ...]:
        return self.rho.cond_vars

    @property
    def alpha_dim(self) -> int:
        return self.alpha0.size

    def beta(self, law: DiscreteLaw) -> float:
        return float(np.max(1.0 - self.selection.prob(law.support)))


def _check_pi(pi: np.ndarray, Z: np.ndarray, spec: MissingDataSpec, upper_open: bool = False):
    W = Z[:, list(spec.selection.w_coords)]
    bad = pi <= 0
    if bad.any():
        raise ContractViolation(f"pi = 0 at W-cell {W[bad][0].tolist()}")
    if upper_open:
        bad = pi >= 1
        if bad.any():
            raise ContractViolation(f"pi = 1 at W-cell {W[bad][0].tolist()}: 1/(1 - pi) undefined")


def build_observational_model(spec: MissingDataSpec, law: DiscreteLaw | None = None,
                              parametric: bool = False) -> MomentModel:
    """Two-block model in theta = alpha (known pi) or theta = (alpha, gamma)."""
    sel, rho, dc = spec.selection, spec.rho, spec.delta_coord
    da = spec.alpha_dim
    if parametric and sel.kind != "logistic":
        raise ContractViolation("parametric selection needs the logistic family")
    dg = sel.n_params if parametric else 0

    def split(theta):
        return theta[:da], (theta[da:] if parametric else None)

    def g1(Z, theta):
        a, gm = split(theta)
        return (Z[:, dc] / sel.prob(Z, gm))[:, None] * rho(Z, a)

    def g2(Z, theta):
        _, gm = split(theta)
        return Z[:, dc] / sel.prob(Z, gm) - 1.0

    def j1(Z, theta):
        a, gm = split(theta)
        pi = sel.prob(Z, gm)
        w = Z[:, dc] / pi
        out = [w[:, None, None] * np.asarray(rho.jacobian(Z, a), dtype=float)]
        if parametric:
            dpi = sel.grad(Z, gm)
            out.append(-(w / pi)[:, None, None] * rho(Z, a)[:, :, None] * dpi[:, None, :])
        return np.concatenate(out, axis=2)

    def j2(Z, theta):
        _, gm = split(theta)
        pi = sel.prob(Z, gm)
        out = [np.zeros((Z.shape[0], 1, da))]
        if parametric:
            out.append(-(Z[:, dc] / pi ** 2)[:, None, None] * sel.grad(Z, gm)[:, None, :])
        return np.concatenate(out, axis=2)

    smooth = rho.smooth and rho.jacobian is not None
    b1 = MomentBlock(rho.output_dim, spec.x_star, g1, j1 if smooth else None, smooth,
                     "ipw-residual", {"rho": rho.family}, sel.prob)
    b2 = MomentBlock(1, sel.w_coords, g2, j2, True, "ipw-selection", {}, sel.prob)
    theta0 = np.concatenate([spec.alpha0, sel.gamma0]) if parametric else spec.alpha0
    if law is not None:
        _check_pi(sel.prob(law.support), law.support, spec)
    return MomentModel((b1, b2), da + dg, spec.z_dim, theta0,
                       "analytic" if smooth else "fd", law,
                       f"{spec.variant}{' parametric' if parametric else ''}")


@dataclass
class ContractionTrace:
    increments: list[float] = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    beta: float = float("nan")
    tol: float = 1e-10

    @property
    def ratios(self) -> list[float]:
        inc = self.increments
        return [inc[i] / inc[i - 1] for i in range(1, len(inc)) if inc[i - 1] > 0]

    def to_dict(self) -> dict:
        return {"increments": self.increments, "ratios": self.ratios, "converged": self.converged,
                "iterations_used": self.iterations_used, "beta": self.beta, "tol": self.tol}


@dataclass
class ContractionResult:
    a1: np.ndarray            # (X*-cells, d, p)
    keys: np.ndarray          # X*-cell values
    driving: np.ndarray       # -E(d rho'/d alpha | X*) M^-1
    trace: ContractionTrace


class _Operator:
    """a1 -> A0 + E{E[a1 rho | W] (1 - pi)/pi rho' | X*} M^-1 on the full-data law."""

    def __init__(self, spec: MissingDataSpec, law: DiscreteLaw, alpha=None):
        alpha = spec.alpha0 if alpha is None else np.asarray(alpha, dtype=float).ravel()
        Z = law.support
        self.law = law
        self.pi = spec.selection.prob(Z)
        _check_pi(self.pi, Z, spec)
        self.rho = spec.rho(Z, alpha)
        self.px = law.partition(spec.x_star)
        self.pw = law.partition(spec.selection.w_coords)
        M = self.px.average((1.0 / self.pi)[:, None, None] * self.rho[:, :, None] * self.rho[:, None, :])
        sv = np.linalg.svd(M, compute_uv=False)
        bad = sv[:, -1] <= 1e-12 * np.maximum(sv[:, 0], 1e-300)
        if bad.any():
            raise ContractViolation(
                f"E(rho rho'/pi | X*) is singular on X*-cells {self.px.keys[bad].tolist()}"
            )
        self.Minv = np.linalg.inv(M)
        model = build_observational_model(spec)
        jac = moment_tables(model, law, alpha).blocks[0].jac            # (cells, p, d)
        self.A0 = -np.einsum("cpd,cpq->cdq", jac, self.Minv)
        self.rho_tilde = self.rho / np.sqrt(self.pi)[:, None]

    def __call__(self, a1: np.ndarray) -> np.ndarray:
        h = np.einsum("sdp,sp->sd", a1[self.px.labels], self.rho)
        Ew = self.pw.expand(self.pw.average(h))
        f = (Ew * ((1.0 - self.pi) / self.pi)[:, None])[:, :, None] * self.rho[:, None, :]
        return self.A0 + np.einsum("cdp,cpq->cdq", self.px.average(f), self.Minv)

    def tilde_norm(self, a1: np.ndarray) -> float:
        return l2_norm(self.law, np.einsum("sdp,sp->sd", a1[self.px.labels], self.rho_tilde))


def contraction_solve_a1(spec: MissingDataSpec, law: DiscreteLaw, tol: float = 1e-10,
                         max_iter: int = 500, alpha=None) -> ContractionResult:
    """Successive approximation for a1*, started at the driving term.

    Increments are L2 norms of (a1^(m) - a1^(m-1)) rho~ with rho~ = pi^(-1/2) rho,
    the norm in which the map contracts with factor beta.
    """
    beta = spec.beta(law)
    if not beta < 1:
        raise ContractViolation(f"beta = sup(1 - pi) = {beta} is not < 1")
    T = _Operator(spec, law, alpha)
    trace = ContractionTrace(beta=beta, tol=tol)
    a = T.A0.copy()
    for m in range(1, max_iter + 1):
        nxt = T(a)
        inc = T.tilde_norm(nxt - a)
        a = nxt
        trace.increments.append(inc)
        trace.iterations_used = m
        if inc < tol:
            trace.converged = True
            break
    if not trace.converged:
        raise NumericalFailure(
            f"contraction did not converge in {max_iter} iterations (beta={beta:.3g}, last increment {trace.increments[-1]:.3e})"
        )
    return ContractionResult(a, T.px.keys, T.A0, trace)


def contraction_residual(spec: MissingDataSpec, law: DiscreteLaw, a1: np.ndarray) -> float:
    """L2 norm of (a1 - T a1) rho~."""
    T = _Operator(spec, law)
    return T.tilde_norm(a1 - T(a1))


def a2_from_a1(spec: MissingDataSpec, law: DiscreteLaw, a1: np.ndarray, alpha=None) -> np.ndarray:
    """-E[a1(X*) rho | W] per W-cell, shape (W-cells, d, 1)."""
    alpha = spec.alpha0 if alpha is None else alpha
    px = law.partition(spec.x_star)
    pw = law.partition(spec.selection.w_coords)
    h = np.einsum("sdp,sp->sd", a1[px.labels], spec.rho(law.support, alpha))
    return -pw.average(h)[:, :, None]


def efficient_field(spec: MissingDataSpec, law: DiscreteLaw, tol: float = 1e-10,
                    max_iter: int = 500) -> tuple[ScoreField, ContractionResult]:
    """(a1*, a2*) on the known-pi observational model."""
    res = contraction_solve_a1(spec, law, tol, max_iter)
    a2 = a2_from_a1(spec, law, res.a1)
    tables = moment_tables(build_observational_model(spec), law)
    return ScoreField.from_tables(tables, [res.a1, a2], {"method": "contraction"}), res


@dataclass
class ParametricScores:
    alpha_field: ScoreField
    gamma_field: ScoreField
    s_alpha: np.ndarray       # (S, d_alpha)
    s_gamma: np.ndarray       # (S, d_gamma)
    a2_gamma: np.ndarray      # (W-cells, d_gamma, 1)
    cross_moment: np.ndarray  # E[S_alpha S_gamma']


def parametric_selection_score(spec: MissingDataSpec, law: DiscreteLaw, tol: float = 1e-10,
                               max_iter: int = 500) -> ParametricScores:
    """Efficient scores for alpha and gamma when pi = pi(W, gamma).

    The alpha part is the known-pi solution. For gamma the block-1
    instrument vanishes and the block-2 instrument is d_gamma pi / (1 - pi).
    """
    if spec.selection.kind != "logistic":
        raise ContractViolation("parametric selection needs the logistic family")
    Z = law.support
    pi = spec.selection.prob(Z)
    _check_pi(pi, Z, spec, upper_open=True)
    model = build_observational_model(spec, parametric=True)
    tables = moment_tables(model, law)
    res = contraction_solve_a1(spec, law, tol, max_iter)
    a2 = a2_from_a1(spec, law, res.a1)
    pw = tables.blocks[1].partition
    dpi = spec.selection.grad(Z)
    a2g = pw.average(dpi / (1.0 - pi)[:, None])[:, :, None]
    dg = spec.selection.n_params
    b1 = tables.blocks[0]
    alpha_field = ScoreField.from_tables(tables, [res.a1, a2], {"component": "alpha"})
    gamma_field = ScoreField.from_tables(
        tables, [np.zeros((b1.partition.n_cells, dg, b1.g.shape[1])), a2g], {"component": "gamma"}
    )
    s_alpha = np.einsum("sdp,sp->sd", res.a1[b1.labels], b1.g) + np.einsum(
        "sdp,sp->sd", a2[pw.labels], tables.blocks[1].g)
    s_gamma = np.einsum("sdp,sp->sd", a2g[pw.labels], tables.blocks[1].g)
    cross = np.einsum("s,si,sj->ij", law.probs, s_alpha, s_gamma)
    return ParametricScores(alpha_field, gamma_field, s_alpha, s_gamma, a2g, cross)


def known_pi_score(spec: MissingDataSpec, law: DiscreteLaw, tol: float = 1e-10) -> np.ndarray:
    """S_bar_alpha at the support points with pi treated as known."""
    fld, _ = efficient_field(spec, law, tol)
    return fld.score(moment_tables(build_observational_model(spec), law))


def ipw_full_law(rows: np.ndarray, spec: MissingDataSpec) -> DiscreteLaw:
    """Full-data law rebuilt from complete cases.

    Complete cases are weighted by 1/pi(W) to estimate the law of the data
    coordinates; delta is then attached with P(delta = 1 | W) = pi(W).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    dc = spec.delta_coord
    cc = rows[rows[:, dc] == 1]
    if cc.shape[0] == 0:
        raise ContractViolation("no complete cases in the sample")
    pi = spec.selection.prob(cc)
    base = weighted_law(cc, 1.0 / pi)
    pts, probs = [], []
    for z, p, q in zip(base.support, base.probs, spec.selection.prob(base.support)):
        pts.append(z.copy())
        probs.append(p * q)
        if q < 1:
            z0 = z.copy()
            z0[dc] = 0.0
            pts.append(z0)
            probs.append(p * (1 - q))
    probs = np.asarray(probs)
    return DiscreteLaw(np.asarray(pts), probs / probs.sum())
