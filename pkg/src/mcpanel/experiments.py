"""Monte Carlo harness: estimator variants, seeded runs and figure tables.

Each run draws one panel, cross-validates the penalty triple once and then
evaluates the six estimator variants

    no_reg     control-only fit without covariate penalties
    imp0       imposed-null fit at the CV (mse) optimum
    imp0_rot   imp0 with the NT/|O| rule-of-thumb rescaling
    imp0_post  unpenalized refit on the support and rank of imp0
    imp0_1se   imposed-null fit at the 1se optimum
    not0       control-only fit at the CV (mse) optimum

Runs are independent given their seeds, so they can be spread over worker
processes; results are always gathered in run order.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dgp import DgpConfig, generate
from .effects import estimate_atet
from .estimator import ConvergenceWarning, Design, PenaltyConfig, fit_design, fit_post_design
from .inference import PermutationPlan, permutation_p_value
from .selection import GridSpec, cross_validate

logger = logging.getLogger(__name__)

VARIANTS = ("no_reg", "imp0", "imp0_rot", "imp0_post", "imp0_1se", "not0")
WORKERS_ENV = "MCPANEL_WORKERS"

FULL_T_GRID = (10, 20, 40, 80, 160, 320, 640)
SNR_SIGMAS = (0.25, 0.5, 1.0, 2.0, 4.0)

# target -> (axis varied, metrics summarized, full-scale runs per setting)
TARGETS = {
    "fig3": ("T", ("tau_hat",), 700),
    "fig4": ("T", ("indexed_sq_error",), 700),
    "fig5": ("T", ("size_ratio_H",), 700),
    "fig8": ("sigma_eps", ("tau_hat", "indexed_sq_error"), 1400),
    "fig9": ("T", ("mse_H",), 700),
    "fig10": ("sigma_eps", ("size_ratio_H",), 1400),
}

RUN_COLUMNS = (
    "setting", "run", "seed", "N", "T", "sigma_eps", "tau", "variant", "tau_hat", "sq_error",
    "indexed_sq_error", "size_H", "size_beta", "true_size_H", "true_size_beta", "size_ratio_H",
    "size_ratio_beta", "rank_L", "mse_H", "mse_beta", "p_value", "lambda_L", "lambda_H",
    "lambda_beta", "converged",
)

SUMMARY_COLUMNS = (
    "target", "setting", "N", "T", "sigma_eps", "variant", "metric", "n", "mean",
    "min", "q25", "median", "q75", "max",
)


@dataclass(frozen=True)
class RunSettings:
    """Estimation settings shared by all runs of an experiment."""

    folds: int = 5
    grid: GridSpec = GridSpec()
    family: str = "moving_block"
    n_perm: int = 999
    max_iterations: int = 500
    rel_tolerance: float = 1e-6


def run_seed(base: int, setting: int, run: int) -> int:
    """Independent 32-bit seed for one (setting, run) pair."""
    return int(np.random.SeedSequence([base, setting, run]).generate_state(1)[0])


def _ratio(a, b):
    return a / b if b else float("nan")


def evaluate_run(config: DgpConfig, settings: RunSettings = RunSettings(), run: int = 0, setting: int = 0):
    """Draw one panel from `config` and evaluate every variant on it.

    Returns
    -------
    list of dict
        One row per variant with the columns of `RUN_COLUMNS`.
    """
    panel, truth, tau = generate(config)
    design = Design.build(panel)
    base = PenaltyConfig(0.0, 0.0, 0.0, settings.max_iterations, settings.rel_tolerance)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        cv = cross_validate(panel, settings.grid, k=settings.folds, seed=config.seed,
                            penalties=base, design=design)
        mse, one, noreg = cv.best_mse, cv.best_1se, cv.best_on_slice(0.0, 0.0)
        fits = {
            "no_reg": fit_design(design, base.with_lambdas(*noreg), "control_only"),
            "imp0": fit_design(design, base.with_lambdas(*mse), "imposed_null"),
            "imp0_1se": fit_design(design, base.with_lambdas(*one), "imposed_null"),
            "not0": fit_design(design, base.with_lambdas(*mse), "control_only"),
        }
        fits["imp0_rot"] = fits["imp0"]
        fits["imp0_post"] = fit_post_design(design, fits["imp0"])

    plan = PermutationPlan.build(panel.shape, settings.family, settings.n_perm, config.seed)
    true_H = int(np.count_nonzero(truth.H))
    true_b = int(np.count_nonzero(truth.beta))
    rows = []
    p_cache = {}
    for name in VARIANTS:
        f = fits[name]
        eff = estimate_atet(panel, f)
        tau_hat = eff.atet_rot if name == "imp0_rot" else eff.atet
        if f.mode.value == "imposed_null":
            if id(f) not in p_cache:
                p_cache[id(f)] = permutation_p_value(panel, f, plan).p_value
            p_value = p_cache[id(f)]
        else:
            p_value = float("nan")
        size_H, size_b = len(f.support_H), len(f.support_beta)
        rows.append({
            "setting": setting, "run": run, "seed": config.seed, "N": config.N, "T": config.T,
            "sigma_eps": float(config.sigma_eps), "tau": float(tau), "variant": name,
            "tau_hat": float(tau_hat), "sq_error": float((tau_hat - tau) ** 2),
            "size_H": size_H, "size_beta": size_b, "true_size_H": true_H, "true_size_beta": true_b,
            "size_ratio_H": float(_ratio(size_H, true_H)), "size_ratio_beta": float(_ratio(size_b, true_b)),
            "rank_L": f.rank_L,
            "mse_H": float(np.mean((f.params.H - truth.H) ** 2)) if truth.H.size else float("nan"),
            "mse_beta": float(np.mean((f.params.beta - truth.beta) ** 2)) if truth.beta.size else float("nan"),
            "p_value": float(p_value),
            "lambda_L": f.penalties.lambda_L, "lambda_H": f.penalties.lambda_H,
            "lambda_beta": f.penalties.lambda_beta, "converged": int(f.converged),
        })
    ref = next(r["sq_error"] for r in rows if r["variant"] == "imp0")
    for r in rows:
        r["indexed_sq_error"] = float(_ratio(r["sq_error"], ref))
    return rows


def _evaluate_job(job):
    config, settings, run, setting = job
    return evaluate_run(config, settings, run, setting)


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_jobs(jobs, workers: Optional[int] = None):
    """Evaluate jobs, in parallel when ``workers > 1``; output keeps job order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        results = [_evaluate_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_job, jobs))
    return [row for rows in results for row in rows]


def simulate(config: DgpConfig, runs: int, settings: RunSettings = RunSettings(), seed: int = 0,
             workers: Optional[int] = None):
    """`runs` independent draws of the design `config` with derived seeds."""
    if runs < 1:
        raise ValueError("runs must be positive")
    jobs = [(config.replace(seed=run_seed(seed, 0, r)), settings, r, 0) for r in range(runs)]
    return run_jobs(jobs, workers)


# --- desk-scale replication ---------------------------------------------------


@dataclass(frozen=True)
class ReplicationPlan:
    target: str
    scale: float
    runs: int
    configs: tuple
    settings: RunSettings

    @property
    def axis(self):
        return TARGETS[self.target][0]

    @property
    def metrics(self):
        return TARGETS[self.target][1]

    def describe(self) -> dict:
        return {
            "target": self.target,
            "scale": self.scale,
            "runs_per_setting": self.runs,
            "settings": [{"N": c.N, "T": c.T, "sigma_eps": c.sigma_eps, "p": c.p, "q": c.q, "B": c.B,
                          "rank_L": c.rank_L} for c in self.configs],
            "grid_points": self.settings.grid.n_points,
            "grid_min_ratio": self.settings.grid.min_ratio,
            "folds": self.settings.folds,
        }


def scaled_runs(full: int, scale: float) -> int:
    return max(1, math.ceil(full * scale ** 3 - 1e-9))


def desk_grid(scale: float) -> GridSpec:
    """Penalty grid shrunk with the scale: ten points per axis at full scale."""
    n_points = max(2, int(round(10 * scale)))
    return GridSpec(n_points=n_points, min_ratio=1e-4 if scale >= 1 else 1e-2)


def plan_replication(target: str, scale: float = 0.25, runs: Optional[int] = None,
                     base: Optional[DgpConfig] = None, settings: Optional[RunSettings] = None,
                     exact_counts: bool = True) -> ReplicationPlan:
    """Settings for one figure at a reduced scale.

    N, T and the covariate dimensions p, q shrink linearly with `scale`
    (at least 4, 1 and 1), the number of unit-time covariates B with its
    square, and the runs per setting with its cube unless `runs` is given.

    Raises
    ------
    ValueError
        For an unknown target or a scale outside ``(0, 1]``.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown replication target {target!r}; choose from {sorted(TARGETS)}")
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    axis, _, full_runs = TARGETS[target]
    base = base or DgpConfig()
    n_runs = runs if runs is not None else scaled_runs(full_runs, scale)
    if n_runs < 1:
        raise ValueError("runs must be positive")

    def lin(v, lo):
        return max(lo, int(round(v * scale)))

    N = lin(base.N, 4)
    common = dict(N=N, p=lin(base.p, 1), q=lin(base.q, 1), B=max(1, int(round(base.B * scale ** 2))),
                  exact_count_bernoulli=exact_counts or base.exact_count_bernoulli)
    configs = []
    if axis == "T":
        for T in sorted({lin(t, 4) for t in FULL_T_GRID}):
            configs.append(base.replace(T=T, rank_L=min(base.rank_L, N, T), **common))
    else:
        T = lin(base.T, 4)
        for s in SNR_SIGMAS:
            configs.append(base.replace(T=T, sigma_eps=s, rank_L=min(base.rank_L, N, T), **common))
    settings = settings or RunSettings(grid=desk_grid(scale))
    return ReplicationPlan(target, float(scale), int(n_runs), tuple(configs), settings)


def replicate(plan: ReplicationPlan, seed: int = 0, workers: Optional[int] = None):
    """Run every (setting, run) pair of `plan`; returns per-run rows."""
    jobs = []
    for s, cfg in enumerate(plan.configs):
        for r in range(plan.runs):
            jobs.append((cfg.replace(seed=run_seed(seed, s, r)), plan.settings, r, s))
    return run_jobs(jobs, workers)


def summarize(rows, metrics, target=""):
    """Quantile table per (setting, variant, metric), NaNs dropped."""
    out = []
    keys = sorted({(r["setting"], r["variant"]) for r in rows}, key=lambda k: (k[0], VARIANTS.index(k[1])))
    for setting, variant in keys:
        sel = [r for r in rows if r["setting"] == setting and r["variant"] == variant]
        first = sel[0]
        for m in metrics:
            vals = np.array([r[m] for r in sel], dtype=float)
            vals = vals[np.isfinite(vals)]
            row = {"target": target, "setting": setting, "N": first["N"], "T": first["T"],
                   "sigma_eps": first["sigma_eps"], "variant": variant, "metric": m, "n": len(vals)}
            if len(vals):
                q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
                row.update(mean=float(vals.mean()), min=float(q[0]), q25=float(q[1]), median=float(q[2]),
                           q75=float(q[3]), max=float(q[4]))
            else:
                row.update({k: float("nan") for k in ("mean", "min", "q25", "median", "q75", "max")})
            out.append(row)
    return out


def rejection_rates(rows, alphas=(0.01, 0.05, 0.1)):
    """Share of runs with ``p <= alpha`` for each imposed-null variant."""
    out = []
    for variant in VARIANTS:
        p = np.array([r["p_value"] for r in rows if r["variant"] == variant], dtype=float)
        p = p[np.isfinite(p)]
        if not len(p):
            continue
        for a in alphas:
            out.append({"variant": variant, "alpha": float(a), "n": len(p),
                        "rejection_rate": float(np.mean(p <= a))})
    return out


def with_grid(settings: RunSettings, **kw) -> RunSettings:
    return replace(settings, grid=replace(settings.grid, **kw))
