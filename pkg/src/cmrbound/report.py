"""Report serialization (JSON, long-format CSV) and report comparison.

Every report has the top-level keys ``task``, ``config``, ``tolerances``,
``flags``, ``results`` and ``comparable``. ``comparable`` maps names to
numeric arrays and is what ``compare`` diffs.

CSV schema: one line per numeric entry, columns ``path,row,col,value``;
``path`` is the dotted key inside ``results``, ``row``/``col`` are empty for
scalars and ``col`` is empty for vectors.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractViolation


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps_json(report: dict) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2) + "\n"


def _leaves(obj: Any, path: str):
    """Yield (path, row, col, value) for numeric entries."""
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _leaves(obj[k], f"{path}.{k}" if path else str(k))
        return
    if isinstance(obj, list):
        arr = None
        try:
            arr = np.asarray(obj, dtype=float)
        except (TypeError, ValueError):
            pass
        if arr is not None and arr.ndim in (1, 2) and arr.dtype != object:
            if arr.ndim == 1:
                for i, v in enumerate(arr):
                    yield path, i, "", v
            else:
                for i in range(arr.shape[0]):
                    for j in range(arr.shape[1]):
                        yield path, i, j, arr[i, j]
            return
        for i, v in enumerate(obj):
            yield from _leaves(v, f"{path}[{i}]")
        return
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return
    if isinstance(obj, (int, float)):
        yield path, "", "", obj


def dumps_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "row", "col", "value"])
    for path, r, c, v in _leaves(to_jsonable(report["results"]), ""):
        w.writerow([path, r, c, repr(float(v))])
    return buf.getvalue()


def write_report(report: dict, path: str | None, fmt: str) -> str:
    text = dumps_json(report) if fmt == "json" else dumps_csv(report)
    if path:
        Path(path).write_text(text)
    return text


def load_report(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"{path}: not a JSON report ({exc})") from exc
    if not isinstance(data, dict) or "comparable" not in data:
        raise ContractViolation(f"{path}: missing 'comparable' section")
    return data


@dataclass
class CompareRow:
    a: str
    b: str
    key: str
    max_abs_diff: float
    exceeds: bool


def compare(reports: list[dict], names: list[str], tol: float = 1e-8) -> list[CompareRow]:
    """Max absolute difference of every shared comparable entry, for each pair."""
    if len(reports) < 2:
        raise ContractViolation("compare needs at least two reports")
    rows = []
    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            ca, cb = reports[i]["comparable"], reports[j]["comparable"]
            shared = sorted(set(ca) & set(cb))
            if not shared:
                raise ContractViolation(f"{names[i]} and {names[j]} have no comparable quantities in common")
            for key in shared:
                a = np.asarray(ca[key], dtype=float)
                b = np.asarray(cb[key], dtype=float)
                if a.shape != b.shape:
                    raise ContractViolation(f"{key}: shapes {a.shape} and {b.shape} differ")
                diff = float(np.max(np.abs(a - b))) if a.size else 0.0
                rows.append(CompareRow(names[i], names[j], key, diff, diff > tol))
    return rows


def format_compare(rows: list[CompareRow], tol: float) -> str:
    out = [f"{'report A':<28} {'report B':<28} {'quantity':<20} {'max |diff|':>12}  flag"]
    for r in rows:
        out.append(f"{r.a:<28} {r.b:<28} {r.key:<20} {r.max_abs_diff:>12.3e}  {'EXCEEDS ' + format(tol, 'g') if r.exceeds else 'ok'}")
    return "\n".join(out) + "\n"
