"""Command line: ``cmrbound run | list | compare``.

Exit codes: 0 success, 1 compare found a difference above --tol,
2 invalid config or precondition, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml
from pydantic import ValidationError

from . import __version__
from .config import ExperimentConfig, build_experiment, config_to_dict, load_config
from .dgp import DGPS, Experiment, build_dgp
from .efficient_score import (backfit_solve, chamberlain_score, oracle_projection,
                              normal_equation_residual, sequential_closed_form)
from .errors import ContractViolation, NumericalFailure
from .estimation import estimate, monte_carlo
from .infobound import info_bound_sequence
from .instruments import INSTRUMENT_FAMILIES, build_family
from .missing_data import (SELECTION_FAMILIES, build_observational_model, build_selection, contraction_residual,
                           efficient_field, parametric_selection_score)
from .model import BLOCK_FAMILIES, build_block, moment_tables
from .numerics import loewner_geq
from .probability import sample_from
from .report import compare, format_compare, load_report, write_report
from .scorefield import second_moment

EXIT_OK, EXIT_DIFF, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


def _task_bound(ex: Experiment, p) -> dict:
    fam = build_family(p.family, ex.law, **p.family_params)
    seq = info_bound_sequence(ex.model, ex.law, ex.theta0, fam, p.k_max, p.stop_tol, p.early_stop)
    mats = [I for _, I in seq.entries]
    monotone = all(loewner_geq(b, a) for a, b in zip(mats, mats[1:]))
    return {
        "results": {"sequence": seq.to_dict(), "information": seq.final, "monotone": monotone,
                    "family": fam.kind, "family_size": len(fam)},
        "comparable": {"information": seq.final},
        "flags": {"stop_rule": seq.stop_rule, "converged_at": seq.converged_at, "monotone": monotone},
        "tolerances": {"stop_tol": p.stop_tol, "loewner_eig_tol": 1e-10},
    }


def _score_results(ex: Experiment, fld, extra: dict, tol: float) -> dict:
    tables = moment_tables(ex.model, ex.law, ex.theta0)
    values = fld.score(tables)
    info = second_moment(ex.law, values)
    resid = normal_equation_residual(ex.model, ex.law, ex.theta0, fld, tables)
    results = {"field": fld.to_dict(), "information": info, "score_values": values,
               "fixed_point_residual": resid, **extra}
    return {
        "results": results,
        "comparable": {"information": info, "score_values": values},
        "flags": dict(fld.flags),
        "tolerances": {"tol": tol},
    }


def _task_score(ex: Experiment, p) -> dict:
    m, law, t = ex.model, ex.law, ex.theta0
    if p.method == "oracle":
        return _score_results(ex, oracle_projection(m, law, t), {"method": "oracle"}, p.tol)
    if p.method == "sequential":
        sol = sequential_closed_form(m, law, t)
        return _score_results(ex, sol.field, {"method": "sequential", "a1_tilde": sol.a1_tilde,
                                              "a2_tilde": sol.a2_tilde}, p.tol)
    if p.method == "chamberlain":
        values = chamberlain_score(m, law, t)
        info = second_moment(law, values)
        return {"results": {"method": "chamberlain", "information": info, "score_values": values},
                "comparable": {"information": info, "score_values": values},
                "flags": {}, "tolerances": {}}
    fld, trace = backfit_solve(m, law, t, p.tol, p.max_iter)
    out = _score_results(ex, fld, {"method": "backfit", "trace": trace.to_dict()}, p.tol)
    out["flags"]["converged"] = trace.converged
    out["tolerances"]["max_iter"] = p.max_iter
    return out


def _task_oracle(ex: Experiment, p) -> dict:
    return _score_results(ex, oracle_projection(ex.model, ex.law, ex.theta0), {"method": "oracle"}, p.tol)


def _task_missing(ex: Experiment, p) -> dict:
    spec, law = ex.spec, ex.law
    parametric = spec.selection.kind == "logistic"
    fld, res = efficient_field(spec, law, p.tol, p.max_iter)
    known = build_observational_model(spec)
    tables = moment_tables(known, law)
    values = fld.score(tables)
    info = second_moment(law, values)
    results = {
        "field": fld.to_dict(), "trace": res.trace.to_dict(), "information": info,
        "score_values": values, "beta": res.trace.beta,
        "fixed_point_residual": contraction_residual(spec, law, res.a1),
    }
    comparable = {"information": info, "score_values": values}
    if parametric:
        ps = parametric_selection_score(spec, law, p.tol, p.max_iter)
        results.update({"gamma_field": ps.gamma_field.to_dict(), "cross_moment": ps.cross_moment,
                        "score_gamma": ps.s_gamma})
        comparable["cross_moment"] = ps.cross_moment
    return {"results": results, "comparable": comparable,
            "flags": {"converged": res.trace.converged, "parametric": parametric},
            "tolerances": {"tol": p.tol, "max_iter": p.max_iter}}


def _task_estimate(ex: Experiment, p) -> dict:
    sample = sample_from(ex.law, p.n, p.seed)
    known = build_observational_model(ex.spec) if ex.spec is not None else ex.model
    res = estimate(known, sample, p.theta_init, p.m_star, ex.spec, p.seed)
    return {"results": {**res.to_dict(), "theta0": ex.theta0[:known.param_dim], "n": p.n, "seed": p.seed},
            "comparable": {"theta_hat": res.theta_hat, "variance_estimate": res.variance_estimate},
            "flags": {"fallback_rows": res.fallback_rows},
            "tolerances": {"optimizer_xtol": 1e-8, "m_star": p.m_star}}


def _task_mc(ex: Experiment, p) -> dict:
    known = build_observational_model(ex.spec) if ex.spec is not None else ex.model
    rep = monte_carlo(known, ex.law, p.n, p.R, p.seed, p.m_star, ex.spec, p.theta_init, p.workers)
    d = rep.to_dict()
    return {"results": d,
            "comparable": {f"{k}_covariance": v.covariance for k, v in rep.estimators.items()}
            | {"reference": rep.reference},
            "flags": {"invalid": rep.invalid, "warnings": rep.warnings, "trace_dominance": rep.trace_dominance},
            "tolerances": {"failure_fraction_max": 0.05, "m_star": p.m_star}}


TASK_RUNNERS = {"bound": _task_bound, "score": _task_score, "oracle": _task_oracle,
                "missing": _task_missing, "estimate": _task_estimate, "mc": _task_mc}


def run_config(cfg: ExperimentConfig, base_dir: str | Path = ".") -> dict:
    ex = build_experiment(cfg, base_dir)
    out = TASK_RUNNERS[cfg.task](ex, cfg.params)
    return {"task": cfg.task, "version": __version__, "config": config_to_dict(cfg),
            "design": ex.name, **out}


def list_builtins() -> str:
    def section(title, reg):
        lines = [title]
        for name in sorted(reg):
            lines.append(f"  {name}: {reg[name]['doc']}")
            lines.append(f"    schema: {json.dumps(reg[name]['schema'], sort_keys=True)}")
        return lines

    lines = []
    lines += section("DGPs", DGPS)
    lines += section("block families", BLOCK_FAMILIES)
    lines += section("pi families", SELECTION_FAMILIES)
    lines += section("instrument families", INSTRUMENT_FAMILIES)
    return "\n".join(lines) + "\n"


def selftest_builtins() -> list[str]:
    """Construct every registry entry from its printed schema; returns the names built."""
    built = []
    for name, e in DGPS.items():
        build_dgp(name, **json.loads(json.dumps(e["schema"])))
        built.append(f"dgp:{name}")
    for name, e in BLOCK_FAMILIES.items():
        build_block(name, **json.loads(json.dumps(e["schema"])))
        built.append(f"block:{name}")
    for name, e in SELECTION_FAMILIES.items():
        build_selection(name, **json.loads(json.dumps(e["schema"])))
        built.append(f"pi:{name}")
    law = build_dgp("DGP-A").law
    for name, e in INSTRUMENT_FAMILIES.items():
        build_family(name, law, **json.loads(json.dumps(e["schema"])))
        built.append(f"instruments:{name}")
    return built


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmrbound", description="Efficiency bounds and efficient scores "
                                 "for several conditional moment restrictions on finite-support laws.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True, help="YAML or JSON config file")
    r.add_argument("--out", help="report path (default: stdout)")
    r.add_argument("--format", choices=["json", "csv"], help="report format (overrides config)")
    r.add_argument("--seed", type=int, help="overrides params.seed")
    r.add_argument("--quiet", action="store_true", help="no summary on stderr")
    sub.add_parser("list", help="list built-in designs and families")
    c = sub.add_parser("compare", help="max absolute differences between JSON reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--tol", type=float, default=1e-8)
    c.add_argument("--quiet", action="store_true")
    return ap


def _err(msg: str) -> None:
    print(f"cmrbound: {msg}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "list":
            sys.stdout.write(list_builtins())
            return EXIT_OK
        if args.verb == "compare":
            reports = [load_report(p) for p in args.reports]
            rows = compare(reports, [Path(p).name for p in args.reports], args.tol)
            if not args.quiet:
                sys.stdout.write(format_compare(rows, args.tol))
            return EXIT_DIFF if any(r.exceeds for r in rows) else EXIT_OK
        cfg = load_config(args.config)
        if args.seed is not None or args.format or args.out:
            data = cfg.model_dump()
            if args.seed is not None:
                data["params"]["seed"] = args.seed
            if args.format:
                data["output"]["format"] = args.format
            if args.out:
                data["output"]["path"] = args.out
            cfg = ExperimentConfig.model_validate(data)
        report = run_config(cfg, Path(args.config).parent)
        text = write_report(report, cfg.output.path, cfg.output.format)
        if not cfg.output.path:
            sys.stdout.write(text)
        if not args.quiet:
            where = cfg.output.path or "stdout"
            _err(f"task {cfg.task} on {report['design']}: report written to {where}")
        return EXIT_OK
    except ValidationError as exc:
        for e in exc.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<config>"
            _err(f"invalid config: {loc}: {e['msg']}")
        return EXIT_INVALID
    except (ContractViolation, FileNotFoundError, OSError) as exc:
        _err(f"invalid input: {exc}")
        return EXIT_INVALID
    except NumericalFailure as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except yaml.YAMLError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
