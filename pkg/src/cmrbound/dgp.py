"""Built-in finite-support designs used by tests, the CLI and the docs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import ContractViolation
from .missing_data import MissingDataSpec, build_observational_model, logistic_selection, table_selection
from .model import MomentModel, linear_block, quantile_block
from .probability import DiscreteLaw


@dataclass(frozen=True, eq=False)
class Experiment:
    name: str
    law: DiscreteLaw
    model: MomentModel
    spec: Optional[MissingDataSpec] = None
    params: dict = field(default_factory=dict)

    @property
    def theta0(self) -> np.ndarray:
        return self.model.theta0


def _law(points, probs, names) -> DiscreteLaw:
    probs = np.asarray(probs, dtype=float)
    return DiscreteLaw(np.asarray(points, dtype=float), probs / probs.sum(), names)


def dgp_a(theta0: float = 0.0, hetero: bool = False) -> Experiment:
    """Z = (X1, X2, Y1, Y2); independent fair binary X's and +-1 errors.

    ``hetero`` scales eps1 by 2 when X1 = 1.
    """
    pts, probs = [], []
    for x1, x2, e1, e2 in itertools.product((0, 1), (0, 1), (-1, 1), (-1, 1)):
        s1 = 2.0 if (hetero and x1 == 1) else 1.0
        pts.append((x1, x2, theta0 + s1 * e1, theta0 + e2))
        probs.append(1 / 16)
    law = _law(pts, probs, ("X1", "X2", "Y1", "Y2"))
    model = MomentModel((linear_block(2, ["1"], (0,)), linear_block(3, ["1"], (1,))),
                        1, 4, np.array([theta0]), "analytic", law, "DGP-A")
    return Experiment("DGP-A", law, model, params={"theta0": theta0, "hetero": hetero})


def dgp_b(theta0: float = 0.0, shared_conditioning: bool = False) -> Experiment:
    """Nested design: block 1 given X1, block 2 given (X1, X2).

    eps1 = r(X1) u and eps2 = s(X2) (eps1 + eta), so the blocks are
    correlated and heteroskedastic. With ``shared_conditioning`` both blocks
    condition on (X1, X2).
    """
    r = {0: 1.0, 1: 1.5}
    s = {0: 0.5, 1: 1.0}
    pts, probs = [], []
    for x1, x2, u, eta in itertools.product((0, 1), (0, 1), (-1, 1), (-1, 1)):
        e1 = r[x1] * u
        e2 = s[x2] * (e1 + eta)
        pts.append((x1, x2, theta0 + e1, theta0 + e2))
        probs.append(1 / 16)
    law = _law(pts, probs, ("X1", "X2", "Y1", "Y2"))
    c1 = (0, 1) if shared_conditioning else (0,)
    model = MomentModel((linear_block(2, ["1"], c1), linear_block(3, ["1"], (0, 1))),
                        1, 4, np.array([theta0]), "analytic", law, "DGP-B")
    return Experiment("DGP-B", law, model,
                      params={"theta0": theta0, "shared_conditioning": shared_conditioning})


_SIGMA = {(1, 0): 1.0, (1, 1): 2.0, (2, 0): 1.5, (2, 1): 0.5}
_PV = {1: 0.3, 2: 0.6}


def dgp_c(variant: str = "missing-regressor", selection: str = "table", alpha0: float = 1.0) -> Experiment:
    """Z = (Y, X, V, V0, delta) with Y = alpha0 X + sigma(X, V) u.

    V0 is an auxiliary variable correlated with u; P(delta = 1 | W) depends
    on V0 only and takes the values 0.5 and 0.8. W = (Y, V, V0) when X is
    missing and W = (X, V, V0) when Y is missing.
    """
    pts, probs = [], []
    for x, v, u, v0, d in itertools.product((1, 2), (0, 1), (-1, 1), (0, 1), (0, 1)):
        pv = _PV[x] if v == 1 else 1 - _PV[x]
        pv0 = (0.7 if u == 1 else 0.3) if v0 == 1 else (0.3 if u == 1 else 0.7)
        pi = 0.8 if v0 == 1 else 0.5
        pd = pi if d == 1 else 1 - pi
        pts.append((alpha0 * x + _SIGMA[(x, v)] * u, x, v, v0, d))
        probs.append(0.5 * pv * 0.5 * pv0 * pd)
    law = _law(pts, probs, ("Y", "X", "V", "V0", "delta"))
    if variant == "missing-regressor":
        w = (0, 2, 3)
    elif variant == "missing-response":
        w = (1, 2, 3)
    else:
        raise ContractViolation(f"unknown variant {variant!r}")
    if selection == "table":
        cells = np.unique(law.support[:, list(w)], axis=0)
        sel = table_selection(w, [list(c) + [0.8 if c[-1] == 1 else 0.5] for c in cells.tolist()])
    elif selection == "logistic":
        sel = logistic_selection(w, ["1", 3], [0.0, float(np.log(4.0))])
    else:
        raise ContractViolation(f"unknown selection family {selection!r}")
    spec = MissingDataSpec(variant, linear_block(0, [1], (1, 2)), sel, np.array([alpha0]), 4, 5)
    model = build_observational_model(spec, law)
    return Experiment("DGP-C", law, model, spec,
                      {"variant": variant, "selection": selection, "alpha0": alpha0})


def dgp_q(theta0: float = 0.0, bandwidth: float = 1.0) -> Experiment:
    """Median version of DGP-A: errors in {-1, 0, 1} with mass (1/4, 1/2, 1/4).

    The middle atom gives the bin-smoothed median residual a positive
    density at the median, so the conditional Jacobian is -1/2.
    """
    pe = {-1: 0.25, 0: 0.5, 1: 0.25}
    pts, probs = [], []
    for x1, x2, e1, e2 in itertools.product((0, 1), (0, 1), (-1, 0, 1), (-1, 0, 1)):
        pts.append((x1, x2, theta0 + e1, theta0 + e2))
        probs.append(0.25 * pe[e1] * pe[e2])
    law = _law(pts, probs, ("X1", "X2", "Y1", "Y2"))
    blocks = (quantile_block(2, ["1"], (0,), 0.5, bandwidth), quantile_block(3, ["1"], (1,), 0.5, bandwidth))
    model = MomentModel(blocks, 1, 4, np.array([theta0]), "fd", law, "DGP-Q")
    return Experiment("DGP-Q", law, model, params={"theta0": theta0, "bandwidth": bandwidth})


def random_design(seed: int = 0, d: int = 1, atoms: int = 4) -> Experiment:
    """Random law on Z = (X1, X2, Y1, Y2) with X1 in {0,1,2}, X2 in {0,1}.

    Errors are drawn per (X1, X2) cell and centred there, so both
    restrictions hold exactly. With d = 2 the blocks are
    Y1 - t1 - t2 X1 and Y2 - t1 - t2 X2.
    """
    if d not in (1, 2):
        raise ContractViolation("random designs support d = 1 or 2")
    rng = np.random.default_rng(seed)
    theta0 = rng.normal(size=d)
    cells = list(itertools.product((0, 1, 2), (0, 1)))
    w = rng.dirichlet(np.ones(len(cells)))
    pts, probs = [], []
    for (x1, x2), wc in zip(cells, w):
        q = rng.dirichlet(np.ones(atoms))
        e = rng.normal(size=(atoms, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]])
        e -= q @ e
        m1 = theta0[0] + (theta0[1] * x1 if d == 2 else 0.0)
        m2 = theta0[0] + (theta0[1] * x2 if d == 2 else 0.0)
        for a in range(atoms):
            pts.append((x1, x2, m1 + e[a, 0], m2 + e[a, 1]))
            probs.append(wc * q[a])
    law = _law(pts, probs, ("X1", "X2", "Y1", "Y2"))
    r1 = ["1", 0] if d == 2 else ["1"]
    r2 = ["1", 1] if d == 2 else ["1"]
    model = MomentModel((linear_block(2, r1, (0,)), linear_block(3, r2, (1,))),
                        d, 4, theta0, "analytic", law, f"random-{seed}")
    return Experiment("random", law, model, params={"seed": seed, "d": d, "atoms": atoms})


def duplicated_design() -> Experiment:
    """DGP-A law with the same block twice: collinear blocks, singular Gram system."""
    base = dgp_a()
    b = linear_block(2, ["1"], (0,))
    model = MomentModel((b, b), 1, 4, np.array([0.0]), "analytic", base.law, "duplicated")
    return Experiment("duplicated", base.law, model)


def three_block_design() -> Experiment:
    """Z = (X1, X2, Y1, Y2, Y3); Y3 = s(X1, X2) (eps1 + eta) / 2 given (X1, X2)."""
    pts, probs = [], []
    for x1, x2, e1, e2, eta in itertools.product((0, 1), (0, 1), (-1, 1), (-1, 1), (-1, 1)):
        s = 1.0 + x1 + 0.5 * x2
        pts.append((x1, x2, e1, e2, s * (e1 + eta) / 2))
        probs.append(1 / 32)
    law = _law(pts, probs, ("X1", "X2", "Y1", "Y2", "Y3"))
    blocks = (linear_block(2, ["1"], (0,)), linear_block(3, ["1"], (1,)), linear_block(4, ["1"], (0, 1)))
    model = MomentModel(blocks, 1, 5, np.array([0.0]), "analytic", law, "three-block")
    return Experiment("three-block", law, model)


DGPS: dict[str, dict[str, Any]] = {
    "DGP-A": {"builder": dgp_a, "schema": {"theta0": 0.0, "hetero": False},
              "doc": "independent binary X1, X2; Y_j = theta0 + eps_j, eps_j = +-1; blocks given X_j"},
    "DGP-B": {"builder": dgp_b, "schema": {"theta0": 0.0, "shared_conditioning": False},
              "doc": "nested conditioning X1 inside (X1, X2); correlated heteroskedastic errors"},
    "DGP-C": {"builder": dgp_c, "schema": {"variant": "missing-regressor", "selection": "table", "alpha0": 1.0},
              "doc": "missing data, Z = (Y, X, V, V0, delta), pi in {0.5, 0.8}"},
    "DGP-Q": {"builder": dgp_q, "schema": {"theta0": 0.0, "bandwidth": 1.0},
              "doc": "median blocks on a three-atom error law; finite-difference Jacobian"},
    "random": {"builder": random_design, "schema": {"seed": 0, "d": 1, "atoms": 4},
               "doc": "seeded random law with exact restrictions (X1 in {0,1,2}, X2 in {0,1})"},
    "duplicated": {"builder": duplicated_design, "schema": {},
                   "doc": "DGP-A law with a duplicated block (degenerate)"},
    "three-block": {"builder": three_block_design, "schema": {},
                    "doc": "three blocks, cyclic backfitting (experimental)"},
}


def build_dgp(name: str, **params) -> Experiment:
    try:
        entry = DGPS[name]
    except KeyError:
        raise ContractViolation(f"unknown DGP {name!r}; known: {sorted(DGPS)}") from None
    unknown = set(params) - set(entry["schema"])
    if unknown:
        raise ContractViolation(f"DGP {name}: unknown parameters {sorted(unknown)}")
    return entry["builder"](**params)
