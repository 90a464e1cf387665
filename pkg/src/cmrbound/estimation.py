"""Three-step efficient estimation and a Monte Carlo harness.

(i) a preliminary minimum-distance estimate with fixed cell-indicator
instruments, (ii) plug-in instruments from the empirical law, (iii) the
solution of the estimated efficient score equations.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize

from .errors import ContractViolation, NumericalFailure, OptimizationError
from .missing_data import MissingDataSpec, contraction_solve_a1, a2_from_a1, efficient_field, ipw_full_law
from .model import MomentModel, _theta, block_values, moment_tables
from .numerics import pinv, sym
from .probability import DiscreteLaw, SampleSet, empirical_law, sample_from
from .efficient_score import backfit_solve, efficient_information
from .scorefield import ScoreField

Data = Union[SampleSet, DiscreteLaw]

OPT_TOL = 1e-8
RESTARTS = 3
LOW_R = 30


def _rows_weights(data: Data) -> tuple[np.ndarray, np.ndarray, int]:
    """Rows, weights summing to one, and the sample size used for variances."""
    if isinstance(data, DiscreteLaw):
        return data.support, data.probs, 1
    n = data.n
    return data.rows, np.full(n, 1.0 / n), n


def _minimize(fun, x0: np.ndarray, restarts: int, seed: int, what: str):
    """Powell from x0, then ``restarts`` perturbed starts; keep the best."""
    rng = np.random.default_rng(seed)
    starts = [np.asarray(x0, dtype=float)]
    best_x, best_f, ok = starts[0], float(fun(starts[0])), False
    for r in range(restarts + 1):
        x = starts[0] if r == 0 else best_x + rng.normal(scale=0.5 * (1 + np.abs(best_x)))
        try:
            res = minimize(fun, x, method="Powell",
                           options={"xtol": OPT_TOL * 1e-2, "ftol": 1e-15, "maxfev": 20000})
        except (FloatingPointError, ValueError):
            continue
        xr = np.atleast_1d(res.x)
        fr = float(res.fun)
        if np.all(np.isfinite(xr)) and np.isfinite(fr) and fr <= best_f:
            best_x, best_f = xr, fr
        ok = ok or bool(res.success)
    if not ok or not np.isfinite(best_f):
        raise OptimizationError(f"{what}: optimizer did not converge", best_x, best_f)
    return best_x, best_f


def _cell_labels(rows: np.ndarray, cond_vars) -> tuple[np.ndarray, int]:
    if not cond_vars:
        return np.zeros(rows.shape[0], dtype=int), 1
    _, inv = np.unique(rows[:, list(cond_vars)], axis=0, return_inverse=True)
    inv = inv.ravel()
    return inv, int(inv.max()) + 1


def preliminary_objective(model: MomentModel, data: Data):
    """theta -> |m_n(theta)|^2 with m_n stacking cell-indicator averages of every block."""
    rows, w, _ = _rows_weights(data)
    labels = [_cell_labels(rows, b.cond_vars) for b in model.blocks]

    def q(theta):
        parts = []
        for j, (lab, nc) in enumerate(labels):
            g = block_values(model, j, rows, theta) * w[:, None]
            parts.append(np.stack([np.bincount(lab, weights=g[:, k], minlength=nc)
                                   for k in range(g.shape[1])], axis=1).ravel())
        m = np.concatenate(parts)
        return float(m @ m)

    return q


def preliminary_estimator(model: MomentModel, data: Data, theta_init=None,
                          restarts: int = RESTARTS, seed: int = 0) -> np.ndarray:
    """Minimum-distance estimate with a fixed cell-indicator instrument set."""
    if isinstance(data, SampleSet) and data.n < 10 * model.param_dim:
        raise ContractViolation(f"need n >= {10 * model.param_dim} for d = {model.param_dim}")
    x0 = np.zeros(model.param_dim) if theta_init is None else _theta(model, theta_init)
    x, _ = _minimize(preliminary_objective(model, data), x0, restarts, seed, "preliminary estimator")
    return x


def plug_in_score_field(model: MomentModel, data: Data, theta_tilde, m_star: int = 25,
                        spec: MissingDataSpec | None = None, tol: float = 1e-10) -> ScoreField:
    """Instrument field estimated on the empirical law with blocks centred at theta_tilde.

    Two-block models run at most ``m_star`` backfitting sweeps. For missing
    data the full-data law is rebuilt from the complete cases by inverse
    probability weighting and the contraction is run to convergence.
    ``flags`` records the iterations used.
    """
    rows, w, _ = _rows_weights(data)
    t = _theta(model, theta_tilde)
    if spec is not None:
        law = ipw_full_law(rows, spec)
        res = contraction_solve_a1(spec, law, tol, max(500, m_star), alpha=t)
        a2 = a2_from_a1(spec, law, res.a1, alpha=t)
        tables = moment_tables(model, law, t)
        return ScoreField.from_tables(tables, [res.a1, a2], {
            "method": "contraction", "iterations": res.trace.iterations_used,
            "converged": res.trace.converged})
    law = data if isinstance(data, DiscreteLaw) else empirical_law(data)
    fld, trace = backfit_solve(model, law, t, tol=tol, max_iter=m_star)
    flags = dict(fld.flags)
    flags.update({"method": "backfit", "iterations": trace.iterations_used,
                  "converged": trace.converged, "m_star": m_star})
    return ScoreField(fld.cond_vars, fld.keys, fld.coefs, flags)


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    preliminary: np.ndarray
    objective: float
    objective_preliminary: float
    variance_estimate: np.ndarray
    iterations_used: Optional[int] = None
    fallback_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "preliminary": self.preliminary.tolist(),
            "objective": self.objective,
            "objective_preliminary": self.objective_preliminary,
            "variance_estimate": self.variance_estimate.tolist(),
            "iterations_used": self.iterations_used,
            "fallback_rows": self.fallback_rows,
        }


def score_rows(model: MomentModel, rows: np.ndarray, fld: ScoreField):
    """theta -> (n, d) estimated efficient score at each row, plus the fallback count."""
    coefs, missed = [], 0
    for j, b in enumerate(model.blocks):
        c, m = fld.lookup(j, rows[:, list(b.cond_vars)])
        coefs.append(c)
        missed += m

    def s(theta):
        out = 0
        for j, c in enumerate(coefs):
            out = out + np.einsum("ndp,np->nd", c, block_values(model, j, rows, theta))
        return out

    return s, missed


def efficient_gmm_solve(model: MomentModel, data: Data, fld: ScoreField, theta_init,
                        restarts: int = 0, seed: int = 0) -> EstimationResult:
    """Zero of the empirical efficient score, by minimizing its squared mean."""
    if not any(np.any(c) for c in fld.coefs):
        raise ContractViolation("degenerate score system: the instrument field is identically zero")
    rows, w, n = _rows_weights(data)
    s, missed = score_rows(model, rows, fld)

    def obj(theta):
        m = w @ s(theta)
        return float(m @ m)

    x0 = _theta(model, theta_init)
    f0 = obj(x0)
    x, f = _minimize(obj, x0, restarts, seed, "efficient score equations")
    if f0 <= f:
        x, f = x0, f0
    S = s(x)
    info = sym(np.einsum("n,ni,nj->ij", w, S, S))
    return EstimationResult(x, x0, f, f0, pinv(info) / n,
                            fld.flags.get("iterations"), missed)


def estimate(model: MomentModel, data: Data, theta_init=None, m_star: int = 25,
             spec: MissingDataSpec | None = None, seed: int = 0) -> EstimationResult:
    """All three steps."""
    pre = preliminary_estimator(model, data, theta_init, seed=seed)
    fld = plug_in_score_field(model, data, pre, m_star, spec)
    return efficient_gmm_solve(model, data, fld, pre, seed=seed)


def exact_information(model: MomentModel, law: DiscreteLaw, spec: MissingDataSpec | None = None) -> np.ndarray:
    if spec is not None:
        fld, _ = efficient_field(spec, law)
    else:
        fld, _ = backfit_solve(model, law, model.theta0)
    return efficient_information(law, model, model.theta0, fld)


@dataclass
class EstimatorSummary:
    mean: np.ndarray
    covariance: np.ndarray
    mse: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist(), "mse": self.mse.tolist()}


@dataclass
class MonteCarloReport:
    R: int
    n: int
    seed: int
    m_star: int
    theta0: np.ndarray
    estimators: dict[str, EstimatorSummary]
    reference: np.ndarray
    failures: list[dict] = field(default_factory=list)
    invalid: bool = False
    warnings: list[str] = field(default_factory=list)
    estimates: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def trace_bound(self) -> float:
        """tr(C_pre) (1 + 3 relative MC error of a variance estimate)."""
        r = len(self.estimates.get("efficient", ()))
        rel = math.sqrt(2.0 / max(r - 1, 1))
        return float(np.trace(self.estimators["preliminary"].covariance)) * (1 + 3 * rel)

    @property
    def trace_dominance(self) -> bool:
        return float(np.trace(self.estimators["efficient"].covariance)) <= self.trace_bound

    def to_dict(self) -> dict:
        return {
            "R": self.R, "n": self.n, "seed": self.seed, "m_star": self.m_star,
            "theta0": self.theta0.tolist(),
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
            "reference": self.reference.tolist(),
            "variance_ratio": (np.diag(self.estimators["efficient"].covariance) / np.diag(self.reference)).tolist(),
            "trace_dominance": self.trace_dominance,
            "failures": self.failures, "invalid": self.invalid, "warnings": self.warnings,
        }

    def csv_rows(self) -> list[dict]:
        out = []
        for name, est in self.estimates.items():
            for r, th in enumerate(est):
                out.append({"estimator": name, "replication": r,
                            **{f"theta{k}": repr(float(v)) for k, v in enumerate(th)}})
        return out


def replication_seeds(seed: int, R: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(R)]


def _summary(est: np.ndarray, theta0: np.ndarray) -> EstimatorSummary:
    cov = np.atleast_2d(np.cov(est, rowvar=False, ddof=1))
    return EstimatorSummary(est.mean(axis=0), sym(cov), ((est - theta0) ** 2).mean(axis=0))


def monte_carlo(model: MomentModel, law: DiscreteLaw, n: int, R: int, seed: int,
                m_star: int = 25, spec: MissingDataSpec | None = None,
                theta_init=None, workers: int = 1) -> MonteCarloReport:
    """R replications of the preliminary and efficient estimators at sample size n.

    Seeds are derived from ``seed`` per replication, so results do not depend
    on ``workers``. Failed replications are counted and excluded; more than
    5% failures marks the report invalid.
    """
    if R < 2:
        raise ContractViolation("R must be at least 2")
    if n < 1:
        raise ContractViolation("n must be at least 1")
    if model.theta0 is None:
        raise ContractViolation("monte_carlo needs a model with theta0")
    theta0 = model.theta0
    seeds = replication_seeds(seed, R)

    def one(r):
        sample = sample_from(law, n, seeds[r])
        try:
            pre = preliminary_estimator(model, sample, theta_init, seed=seeds[r])
            fld = plug_in_score_field(model, sample, pre, m_star, spec)
            eff = efficient_gmm_solve(model, sample, fld, pre)
            return pre, eff.theta_hat, None
        except (NumericalFailure, ContractViolation, np.linalg.LinAlgError) as exc:
            return None, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]

    failures = [{"replication": r, "seed": seeds[r], "error": err}
                for r, (_, _, err) in enumerate(results) if err is not None]
    good = [(p, e) for p, e, err in results if err is None]
    warnings = []
    if R < LOW_R:
        warnings.append(f"low replication count R={R} (< {LOW_R}); Monte Carlo error is large")
    invalid = len(failures) > 0.05 * R
    if len(good) < 2:
        raise NumericalFailure(f"only {len(good)} of {R} replications succeeded")
    pre = np.array([p for p, _ in good])
    eff = np.array([e for _, e in good])
    info = exact_information(model, law, spec)
    return MonteCarloReport(
        R, n, seed, m_star, theta0,
        {"preliminary": _summary(pre, theta0), "efficient": _summary(eff, theta0)},
        pinv(info) / n, failures, invalid, warnings,
        {"preliminary": pre, "efficient": eff},
    )
