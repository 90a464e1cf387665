"""Exact finite-support probability engine.

Everything downstream reduces to sums over the support of a ``DiscreteLaw``:
conditional expectations are probability-weighted cell averages, where a cell
is the set of support points sharing the values of the conditioning
coordinates. Zero-probability cells never appear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ContractViolation

PROB_TOL = 1e-12

Values = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Finite-support law of Z: ``support`` is (S, q), ``probs`` is (S,)."""

    support: np.ndarray
    probs: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=float))
        probs = np.asarray(self.probs, dtype=float).ravel()
        if support.shape[0] != probs.size:
            raise ContractViolation(
                f"support has {support.shape[0]} points but {probs.size} probabilities"
            )
        if not np.all(np.isfinite(support)):
            raise ContractViolation("support has non-finite coordinates")
        if np.any(probs <= 0):
            raise ContractViolation("probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > PROB_TOL * max(1, probs.size):
            raise ContractViolation(f"probabilities sum to {probs.sum()!r}, not 1")
        if np.unique(support, axis=0).shape[0] != support.shape[0]:
            raise ContractViolation("support points must be distinct")
        if self.names is not None and len(self.names) != support.shape[1]:
            raise ContractViolation("names must match the number of coordinates")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_partitions", {})

    @property
    def size(self) -> int:
        return self.probs.size

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def partition(self, cond_vars: Sequence[int]) -> "Partition":
        key = tuple(int(c) for c in cond_vars)
        cache = self._partitions
        if key not in cache:
            cache[key] = Partition.build(self, key)
        return cache[key]

    def expect(self, values: Values) -> np.ndarray:
        """Marginal expectation."""
        vals = _evaluate(self, values)
        return np.tensordot(self.probs, vals, axes=(0, 0))

    # -- columnar text format: one support point per line, probability last

    def to_text(self) -> str:
        lines = []
        if self.names:
            lines.append("# " + " ".join(self.names) + " prob")
        for row, p in zip(self.support, self.probs):
            lines.append(" ".join(repr(float(v)) for v in row) + " " + repr(float(p)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DiscreteLaw":
        rows = []
        names = None
        for line in text.splitlines():
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                toks = s[1:].split()
                if toks and toks[-1] == "prob":
                    names = tuple(toks[:-1])
                continue
            rows.append([float(t) for t in s.replace(",", " ").split()])
        if not rows:
            raise ContractViolation("law file has no support points")
        widths = {len(r) for r in rows}
        if len(widths) != 1 or widths.pop() < 2:
            raise ContractViolation("every line needs the same number (>= 2) of columns")
        arr = np.array(rows)
        return cls(arr[:, :-1], arr[:, -1], names)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "DiscreteLaw":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class Partition:
    """Cells of the support induced by the coordinates ``cond_vars``.

    ``keys[c]`` holds the coordinate values of cell ``c`` (cells sorted
    lexicographically), ``labels[s]`` the cell of support point ``s``.
    """

    cond_vars: tuple[int, ...]
    keys: np.ndarray
    labels: np.ndarray
    cell_probs: np.ndarray
    point_probs: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, law: DiscreteLaw, cond_vars: tuple[int, ...]) -> "Partition":
        for c in cond_vars:
            if not 0 <= c < law.dim:
                raise ContractViolation(f"conditioning coordinate {c} outside 0..{law.dim - 1}")
        if cond_vars:
            keys, labels = np.unique(law.support[:, list(cond_vars)], axis=0, return_inverse=True)
            labels = labels.ravel()
        else:
            keys = np.zeros((1, 0))
            labels = np.zeros(law.size, dtype=int)
        cell_probs = np.bincount(labels, weights=law.probs, minlength=keys.shape[0])
        return cls(cond_vars, keys, labels, cell_probs, law.probs)

    @property
    def n_cells(self) -> int:
        return self.keys.shape[0]

    def cell_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum of ``P(point) * values`` within each cell: shape (n_cells, ...)."""
        values = np.asarray(values, dtype=float)
        out = np.zeros((self.n_cells,) + values.shape[1:])
        weighted = values * self.point_probs.reshape((-1,) + (1,) * (values.ndim - 1))
        np.add.at(out, self.labels, weighted)
        return out

    def average(self, values: np.ndarray) -> np.ndarray:
        """Conditional expectation per cell."""
        sums = self.cell_sum(values)
        return sums / self.cell_probs.reshape((-1,) + (1,) * (sums.ndim - 1))

    def expand(self, cell_values: np.ndarray) -> np.ndarray:
        """Broadcast per-cell values back to support points."""
        return np.asarray(cell_values)[self.labels]

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Cell index of each row of ``x`` (values of cond_vars); -1 if unseen."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.cond_vars:
            return np.zeros(x.shape[0], dtype=int)
        lookup = {tuple(k): i for i, k in enumerate(self.keys.tolist())}
        return np.array([lookup.get(tuple(r), -1) for r in x.tolist()], dtype=int)


@dataclass(frozen=True, eq=False)
class CondTable:
    """Per-cell values of a conditional expectation."""

    partition: Partition
    values: np.ndarray

    @property
    def cond_vars(self) -> tuple[int, ...]:
        return self.partition.cond_vars

    @property
    def keys(self) -> np.ndarray:
        return self.partition.keys

    def at_points(self) -> np.ndarray:
        return self.partition.expand(self.values)

    def items(self):
        for k, v in zip(self.partition.keys.tolist(), self.values):
            yield tuple(k), v


def _evaluate(law: DiscreteLaw, values: Values) -> np.ndarray:
    if callable(values):
        values = values(law.support)
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[0] != law.size:
        values = np.broadcast_to(values, (law.size,) + np.shape(values)).copy()
    return values


def cond_expectation(law: DiscreteLaw, f: Values, cond_vars: Sequence[int] = ()) -> CondTable:
    """Exact E[f(Z) | Z[cond_vars]] as a table over positive-probability cells."""
    part = law.partition(cond_vars)
    return CondTable(part, part.average(_evaluate(law, f)))


def cond_variance(law: DiscreteLaw, f: Values, cond_vars: Sequence[int] = ()) -> CondTable:
    """Cellwise E[f f'] - E[f]E[f]' for a vector-valued ``f`` (values of shape (S, p))."""
    vals = _evaluate(law, f)
    if vals.ndim == 1:
        vals = vals[:, None]
    part = law.partition(cond_vars)
    mean = part.average(vals)
    second = part.average(vals[:, :, None] * vals[:, None, :])
    var = second - mean[:, :, None] * mean[:, None, :]
    return CondTable(part, 0.5 * (var + np.swapaxes(var, 1, 2)))


@dataclass(frozen=True, eq=False)
class SampleSet:
    rows: np.ndarray
    seed: int
    indices: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def sample_from(law: DiscreteLaw, n: int, seed: int) -> SampleSet:
    """``n`` i.i.d. draws by inverse CDF; bit-reproducible for a given seed."""
    if n < 1:
        raise ContractViolation("n must be at least 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(law.probs)
    u = rng.random(n) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), law.size - 1)
    return SampleSet(law.support[idx], int(seed), idx)


def empirical_law(sample: SampleSet, names: tuple[str, ...] | None = None) -> DiscreteLaw:
    """Distinct rows with relative frequencies."""
    if sample.n < 1:
        raise ContractViolation("empty sample")
    rows, counts = np.unique(sample.rows, axis=0, return_counts=True)
    return DiscreteLaw(rows, counts / counts.sum(), names)


def weighted_law(rows: np.ndarray, weights: np.ndarray, names=None) -> DiscreteLaw:
    """Law on the distinct rows of ``rows`` with mass proportional to summed ``weights``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    weights = np.asarray(weights, dtype=float)
    keys, inv = np.unique(rows, axis=0, return_inverse=True)
    mass = np.bincount(inv.ravel(), weights=weights, minlength=keys.shape[0])
    keep = mass > 0
    return DiscreteLaw(keys[keep], mass[keep] / mass[keep].sum(), names)


def total_variation(a: DiscreteLaw, b: DiscreteLaw) -> float:
    pts = np.unique(np.vstack([a.support, b.support]), axis=0)
    index = {tuple(r): i for i, r in enumerate(pts.tolist())}
    pa = np.zeros(len(pts))
    pb = np.zeros(len(pts))
    for r, p in zip(a.support.tolist(), a.probs):
        pa[index[tuple(r)]] = p
    for r, p in zip(b.support.tolist(), b.probs):
        pb[index[tuple(r)]] = p
    return 0.5 * float(np.abs(pa - pb).sum())
