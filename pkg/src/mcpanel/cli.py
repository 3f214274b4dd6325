"""Command-line interface.

Commands: ``fit``, ``cv``, ``infer``, ``simulate``, ``replicate``.
Exit codes: 0 success, 1 numerical non-convergence (outputs are still
written), 2 usage, input or validation errors. The worker count for
``simulate`` and ``replicate`` is read from ``MCPANEL_WORKERS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .dgp import DgpConfig, generate
from .effects import estimate_atet
from .estimator import (
    ConvergenceWarning,
    Design,
    EmptyControlSetError,
    FitResult,
    Mode,
    PenaltyConfig,
    _finish,
    _state_from_params,
    fit_design,
    fit_post_design,
)
from .experiments import (
    TARGETS,
    RunSettings,
    plan_replication,
    rejection_rates,
    replicate,
    simulate,
    summarize,
    RUN_COLUMNS,
    SUMMARY_COLUMNS,
)
from .inference import FAMILIES, PermutationPlan, permutation_p_value
from .panel import PanelValidationError
from .selection import DegenerateFoldsError, GridSpec, cross_validate

logger = logging.getLogger("mcpanel")

EXIT_OK, EXIT_NONCONVERGED, EXIT_USAGE = 0, 1, 2

PENALTY_KEYS = {f.name for f in fields(PenaltyConfig)}
DGP_KEYS = {f.name for f in fields(DgpConfig)}


class UsageError(Exception):
    pass


# --- shared argument groups ----------------------------------------------------


def _add_data_args(p):
    g = p.add_argument_group("panel input")
    g.add_argument("--data", help="directory holding Y.csv, W.csv and optional X.csv, Z.csv, V.csv")
    for key in ("Y", "W", "X", "Z", "V"):
        g.add_argument(f"--{key.lower()}-file", dest=f"file_{key}", help=f"explicit path of the {key} file")


def _add_penalty_args(p):
    g = p.add_argument_group("solver")
    g.add_argument("--config", help="key = value file; command-line flags take precedence")
    g.add_argument("--max-iterations", type=int)
    g.add_argument("--rel-tolerance", type=float)
    g.add_argument("--no-fixed-effects", action="store_true")
    g.add_argument("--no-standardize", action="store_true")


def _add_grid_args(p, folds=5):
    g = p.add_argument_group("cross-validation")
    g.add_argument("--folds", type=int, default=folds)
    g.add_argument("--grid-points", type=int, help="log-spaced points per penalty axis (plus zero)")
    g.add_argument("--min-ratio", type=float, help="smallest grid value as a fraction of lambda max")
    g.add_argument("--search", choices=("grid", "hypercube"), default="grid")


def _add_dgp_args(p):
    g = p.add_argument_group("data-generating process")
    for f in fields(DgpConfig):
        if f.name == "seed":
            continue
        if f.type in ("bool", bool):
            g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"dgp_{f.name}", action="store_true", default=None)
        else:
            kind = int if f.type in ("int", int) else float
            g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"dgp_{f.name}", type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpanel", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the penalized model for a given penalty triple")
    _add_data_args(p)
    _add_penalty_args(p)
    p.add_argument("--mode", help="imposed-null (default) or control-only")
    p.add_argument("--lambda-l", type=float)
    p.add_argument("--lambda-h", type=float)
    p.add_argument("--lambda-beta", type=float)
    p.add_argument("--post", action="store_true", help="unpenalized refit on the support of a stage-1 fit")
    p.add_argument("--stage1", help="directory of a previous `fit` run (default: --out)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cv", help="cross-validate the penalty triple")
    _add_data_args(p)
    _add_penalty_args(p)
    _add_grid_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--criterion", choices=("mse", "1se"), default="mse")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="permutation p-value from an imposed-null fit")
    _add_data_args(p)
    p.add_argument("--fit", required=True, help="directory written by `fit`")
    p.add_argument("--family", default="moving-block", help="moving-block or iid")
    p.add_argument("--n-perm", type=int, default=999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo runs of one simulation design")
    _add_dgp_args(p)
    _add_grid_args(p)
    p.add_argument("--config", help="key = value file with DGP fields")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--write-panel", action="store_true", help="also write the first drawn panel as CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replicate", help="desk-scale tables for one simulation figure")
    p.add_argument("target", help=f"one of {', '.join(TARGETS)}")
    p.add_argument("--scale", type=float, default=0.25)
    p.add_argument("--runs", type=int, help="runs per setting (default scales with --scale)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--min-ratio", type=float)
    p.add_argument("--out", required=True)
    return parser


# --- helpers --------------------------------------------------------------------


def _load_panel(args):
    paths = {k: getattr(args, f"file_{k}") for k in ("Y", "W", "X", "Z", "V") if getattr(args, f"file_{k}")}
    if args.data is None and not ("Y" in paths and "W" in paths):
        raise UsageError("give --data DIR or both --y-file and --w-file")
    return io.read_panel(args.data, **paths)


def _file_config(args, allowed):
    if not getattr(args, "config", None):
        return {}
    cfg = io.read_config(args.config)
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
    return cfg


def _penalties(args, need_lambdas):
    cfg = _file_config(args, PENALTY_KEYS | {"mode"})
    values = {k: v for k, v in cfg.items() if k in PENALTY_KEYS}
    for key, flag in (("lambda_L", "lambda_l"), ("lambda_H", "lambda_h"), ("lambda_beta", "lambda_beta"),
                      ("max_iterations", "max_iterations"), ("rel_tolerance", "rel_tolerance")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if need_lambdas:
        missing = [k for k in ("lambda_L", "lambda_H", "lambda_beta") if k not in values]
        if missing:
            raise UsageError(f"missing penalties: {', '.join(missing)}")
    for k in ("lambda_L", "lambda_H", "lambda_beta"):
        values.setdefault(k, 0.0)
    return PenaltyConfig(**{k: float(v) if k != "max_iterations" else int(v) for k, v in values.items()}), cfg


def _grid(args, default=None):
    grid = default or GridSpec()
    kw = {}
    if args.grid_points is not None:
        kw["n_points"] = args.grid_points
    if args.min_ratio is not None:
        kw["min_ratio"] = args.min_ratio
    return GridSpec(**{**asdict(grid), **kw})


def _design(args, panel):
    return Design.build(panel, standardize=not args.no_standardize, fixed_effects=not args.no_fixed_effects)


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return path


def _argv_snapshot(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# --- commands -------------------------------------------------------------------


def cmd_fit(args) -> int:
    started = io.now()
    panel = _load_panel(args)
    out = _out_dir(args)
    design = _design(args, panel)
    cfg_mode = _file_config(args, PENALTY_KEYS | {"mode"}).get("mode")
    mode = Mode.parse(args.mode or cfg_mode or "imposed_null")
    if args.post:
        stage_dir = Path(args.stage1 or args.out)
        summary_path = stage_dir / "fit_summary.json"
        if not summary_path.is_file():
            raise UsageError(f"--post needs a stage-1 fit; no fit_summary.json in {stage_dir}")
        stage = json.loads(summary_path.read_text())
        if stage.get("post"):
            raise UsageError(f"{summary_path} is already a post fit")
        params = io.read_params(stage_dir, panel)
        pen = PenaltyConfig(stage["lambda_L"], stage["lambda_H"], stage["lambda_beta"])
        st = _state_from_params(design, design.scaling.to_standardized(params, design.panel))
        first = _finish(design, st, np.array([stage["objective"]]), True, Mode.parse(stage["mode"]), pen,
                        design.mask_for(Mode.parse(stage["mode"])))
        # the support and rank come from the saved stage-1 solution
        first.rank_L = int(stage["rank_L"])
        result = fit_post_design(design, first)
    else:
        penalties, _ = _penalties(args, need_lambdas=True)
        result = fit_design(design, penalties, mode)
    outputs = io.write_params(out, result.params, panel)
    summary = result.summary()
    effect = None
    if panel.n_treated and panel.n_control:
        e = estimate_atet(panel, result)
        effect = {"atet": e.atet, "atet_rot": e.atet_rot, "n_treated": e.n_treated, "n_control": e.n_control}
    summary["effect"] = effect
    outputs.append(_write_json(out / "fit_summary.json", summary))
    io.write_manifest(out, "fit", _argv_snapshot(args), {}, outputs, started)
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_cv(args) -> int:
    started = io.now()
    panel = _load_panel(args)
    out = _out_dir(args)
    penalties, _ = _penalties(args, need_lambdas=False)
    design = _design(args, panel)
    res = cross_validate(panel, _grid(args), k=args.folds, seed=args.seed, criterion=args.criterion,
                         penalties=penalties, design=design, search=args.search)
    res.to_csv(out / "cv.csv")
    chosen = {
        "criterion": args.criterion,
        "selected": dict(zip(("lambda_L", "lambda_H", "lambda_beta"), res.selected())),
        "mse": dict(zip(("lambda_L", "lambda_H", "lambda_beta"), res.best_mse)),
        "1se": dict(zip(("lambda_L", "lambda_H", "lambda_beta"), res.best_1se)),
        "lambda_max": dict(zip(("lambda_L", "lambda_H", "lambda_beta"), res.lambda_max.astuple())),
        "all_converged": bool(res.converged.all()),
    }
    with open(out / "selected.csv", "w") as fh:
        fh.write("criterion,lambda_L,lambda_H,lambda_beta\n")
        for crit in ("mse", "1se"):
            lam = chosen[crit]
            fh.write(f"{crit},{lam['lambda_L']!r},{lam['lambda_H']!r},{lam['lambda_beta']!r}\n")
    _write_json(out / "selected.json", chosen)
    io.write_manifest(out, "cv", _argv_snapshot(args), {"folds": args.seed},
                      [out / "cv.csv", out / "selected.csv", out / "selected.json"], started)
    print(json.dumps(chosen["selected"], sort_keys=True))
    return EXIT_OK if chosen["all_converged"] else EXIT_NONCONVERGED


def cmd_infer(args) -> int:
    started = io.now()
    panel = _load_panel(args)
    out = _out_dir(args)
    fit_dir = Path(args.fit)
    summary_path = fit_dir / "fit_summary.json"
    if not summary_path.is_file():
        raise UsageError(f"no fit_summary.json in {fit_dir}; run `fit` first")
    stage = json.loads(summary_path.read_text())
    if Mode.parse(stage["mode"]) is not Mode.IMPOSED_NULL:
        raise UsageError("permutation inference requires an imposed-null fit")
    family = args.family.replace("-", "_")
    if family not in FAMILIES:
        raise UsageError(f"unknown permutation family {args.family!r}")
    params = io.read_params(fit_dir, panel)
    fr = FitResult(params, np.array([stage["objective"]]), bool(stage["converged"]), int(stage["n_iterations"]),
                   params.support_H(), params.support_beta(), int(stage["rank_L"]), Mode.IMPOSED_NULL,
                   PenaltyConfig(stage["lambda_L"], stage["lambda_H"], stage["lambda_beta"]))
    plan = PermutationPlan.build(panel.shape, family, args.n_perm, args.seed)
    res = permutation_p_value(panel, fr, plan)
    res.to_csv(out / "inference.csv")
    io.write_manifest(out, "infer", _argv_snapshot(args), {"permutations": args.seed}, [out / "inference.csv"],
                      started)
    print(f"statistic={res.statistic!r} p_value={res.p_value!r} permutations={res.n_permutations}")
    return EXIT_OK


def _dgp_config(args) -> DgpConfig:
    values = _file_config(args, DGP_KEYS)
    for f in fields(DgpConfig):
        v = getattr(args, f"dgp_{f.name}", None)
        if v is not None:
            values[f.name] = v
    values.pop("seed", None)
    return DgpConfig.from_dict(values)


def cmd_simulate(args) -> int:
    started = io.now()
    if args.runs < 1:
        raise UsageError("--runs must be positive")
    config = _dgp_config(args)
    out = _out_dir(args)
    settings = RunSettings(folds=args.folds, grid=_grid(args, GridSpec(n_points=3, min_ratio=1e-2)))
    rows = simulate(config, args.runs, settings, seed=args.seed)
    outputs = [out / "runs.csv", out / "summary.csv", out / "rejection.csv"]
    io.write_rows(out / "runs.csv", rows, RUN_COLUMNS)
    io.write_rows(out / "summary.csv", summarize(rows, ("tau_hat", "size_ratio_H", "mse_H", "p_value"), "simulate"),
                  SUMMARY_COLUMNS)
    io.write_rows(out / "rejection.csv", rejection_rates(rows), ("variant", "alpha", "n", "rejection_rate"))
    if args.write_panel:
        panel, _, _ = generate(config.replace(seed=rows[0]["seed"]))
        outputs += io.write_panel(out / "panel", panel)
    io.write_config(out / "dgp.cfg", config.to_dict())
    outputs.append(out / "dgp.cfg")
    io.write_manifest(out, "simulate", {"dgp": config.to_dict(), "runs": args.runs, "folds": args.folds,
                                        "grid": asdict(settings.grid)},
                      {"base": args.seed, "runs": sorted({r["seed"] for r in rows})}, outputs, started)
    print(f"wrote {len(rows)} rows to {out / 'runs.csv'}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NONCONVERGED


def cmd_replicate(args) -> int:
    started = io.now()
    try:
        plan = plan_replication(args.target, args.scale, args.runs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    settings = RunSettings(folds=args.folds, grid=_grid(args, plan.settings.grid))
    plan = plan.__class__(plan.target, plan.scale, plan.runs, plan.configs, settings)
    out = _out_dir(args)
    rows = replicate(plan, seed=args.seed)
    io.write_rows(out / "runs.csv", rows, RUN_COLUMNS)
    io.write_rows(out / "summary.csv", summarize(rows, plan.metrics, plan.target), SUMMARY_COLUMNS)
    desc = plan.describe()
    desc["grid_points"] = settings.grid.n_points
    desc["grid_min_ratio"] = settings.grid.min_ratio
    io.write_manifest(out, "replicate", desc, {"base": args.seed}, [out / "runs.csv", out / "summary.csv"],
                      started)
    print(f"{plan.target}: {len(plan.configs)} settings x {plan.runs} runs -> {out / 'summary.csv'}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NONCONVERGED


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return COMMANDS[args.command](args)
    except (UsageError, io.InputFileError, PanelValidationError, EmptyControlSetError,
            DegenerateFoldsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
