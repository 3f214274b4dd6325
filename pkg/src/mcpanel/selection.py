"""Cross-validated choice of ``(lambda_L, lambda_H, lambda_beta)``.

Folds are random subsets of the untreated cells whose share of ``O`` equals
the untreated share of the panel. Each grid triple is fitted on every
training set with the loss restricted to that set, and scored by the mean
squared prediction error on the held-out untreated cells.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .estimator import (
    Design,
    LambdaMax,
    Mode,
    PenaltyConfig,
    _solve,
    _zero_state,
    lambda_max_design,
)
from .panel import ZERO_TOL, PanelData

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class DegenerateFoldsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CvFolds:
    """K training sets ``O_k`` and their evaluation complements ``O \\ O_k``.

    Index arrays hold row-major flat cell indices into the N x T panel.
    """

    k: int
    shape: tuple
    train_sets: tuple
    eval_sets: tuple
    seed: int = 0

    def train_mask(self, fold: int) -> np.ndarray:
        m = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        m[self.train_sets[fold]] = True
        return m.reshape(self.shape)

    def eval_mask(self, fold: int) -> np.ndarray:
        m = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        m[self.eval_sets[fold]] = True
        return m.reshape(self.shape)


def fold_size(n_control: int, n_cells: int) -> int:
    return int(round(n_control * n_control / n_cells))


def make_folds(panel: PanelData, k: int = 5, seed: int = 0) -> CvFolds:
    """Draw `k` training sets of size ``round(|O|^2 / NT)`` uniformly from ``O``.

    Raises
    ------
    DegenerateFoldsError
        If the evaluation sets would be empty (no treated cells) or the
        training sets would be empty.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    N, T = panel.shape
    O = np.flatnonzero(panel.control.ravel())
    if len(O) < k:
        raise DegenerateFoldsError(f"|O|={len(O)} is smaller than k={k}")
    size = fold_size(len(O), N * T)
    if size >= len(O):
        raise DegenerateFoldsError(
            f"degenerate folds: training size {size} leaves no evaluation cells (|O|={len(O)}, NT={N * T})"
        )
    if size < 1:
        raise DegenerateFoldsError(f"degenerate folds: training size {size} from |O|={len(O)}")
    rng = np.random.default_rng(seed)
    train, evals = [], []
    for _ in range(k):
        chosen = np.sort(rng.choice(O, size=size, replace=False))
        train.append(chosen)
        evals.append(np.setdiff1d(O, chosen, assume_unique=True))
    return CvFolds(k, (N, T), tuple(train), tuple(evals), seed)


@dataclass(frozen=True)
class GridSpec:
    """Per-axis penalty grid.

    Each axis is log-spaced from its upper bound down to
    ``bound * min_ratio`` with `n_points` values, plus zero. `n_points` and
    `min_ratio` may be given per axis as ``(L, H, beta)`` tuples. Explicit
    axis values override the generated ones.
    """

    n_points: object = 10
    min_ratio: object = 1e-4
    include_zero: bool = True
    lambda_L: Optional[Sequence[float]] = None
    lambda_H: Optional[Sequence[float]] = None
    lambda_beta: Optional[Sequence[float]] = None

    def _per_axis(self, value, name):
        if np.ndim(value) == 0:
            return value
        return value[("lambda_L", "lambda_H", "lambda_beta").index(name)]

    def axis(self, name: str, upper: float) -> np.ndarray:
        explicit = getattr(self, name)
        n_points = int(self._per_axis(self.n_points, name))
        ratio = float(self._per_axis(self.min_ratio, name))
        if explicit is not None:
            vals = np.asarray(explicit, dtype=float)
        elif upper > 0 and n_points > 0:
            vals = np.geomspace(upper, upper * ratio, n_points)
            if self.include_zero:
                vals = np.append(vals, 0.0)
        else:
            vals = np.array([0.0])
        return np.unique(vals)[::-1]


@dataclass
class CvResult:
    """Cross-validation surface over evaluated penalty triples.

    `grid` rows are ``(lambda_L, lambda_H, lambda_beta)``; `fold_errors`
    holds the held-out mean squared error per triple and fold. `cv_error`
    is the mean over folds and `cv_se` its standard error.
    """

    grid: np.ndarray
    fold_errors: np.ndarray
    converged: np.ndarray
    size_H: np.ndarray
    size_beta: np.ndarray
    rank_L: np.ndarray
    lambda_max: LambdaMax
    k: int
    seed: int
    criterion: str = "mse"
    source: list = field(default_factory=list)

    @property
    def cv_error(self) -> np.ndarray:
        return self.fold_errors.mean(axis=1)

    @property
    def cv_se(self) -> np.ndarray:
        return self.fold_errors.std(axis=1, ddof=1) / np.sqrt(self.fold_errors.shape[1])

    @property
    def best_mse_index(self) -> int:
        err = self.cv_error
        best = np.flatnonzero(err == err.min())
        # ties: prefer the larger penalties, independent of enumeration order
        return int(max(best, key=lambda i: _preference(self.grid[i])))

    @property
    def best_1se_index(self) -> int:
        i = self.best_mse_index
        band = self.cv_error[i] + self.cv_se[i]
        inside = np.flatnonzero(self.cv_error <= band)
        return int(max(inside, key=lambda j: _preference(self.grid[j])))

    @property
    def best_mse(self):
        return tuple(float(v) for v in self.grid[self.best_mse_index])

    @property
    def best_1se(self):
        return tuple(float(v) for v in self.grid[self.best_1se_index])

    def selected(self, criterion: Optional[str] = None):
        criterion = criterion or self.criterion
        if criterion == "mse":
            return self.best_mse
        if criterion == "1se":
            return self.best_1se
        raise ValueError(f"unknown criterion {criterion!r}")

    def best_on_slice(self, lambda_H=0.0, lambda_beta=0.0):
        """MSE-optimal triple among those with the given covariate penalties."""
        on = np.flatnonzero((self.grid[:, 1] == lambda_H) & (self.grid[:, 2] == lambda_beta))
        if on.size == 0:
            raise ValueError("no evaluated triple on the requested slice")
        err = self.cv_error[on]
        best = on[err == err.min()]
        i = max(best, key=lambda j: _preference(self.grid[j]))
        return tuple(float(v) for v in self.grid[i])

    def rows(self):
        """Tabular export: one row per triple and fold, then summary rows."""
        out = []
        for g, lam in enumerate(self.grid):
            for f in range(self.fold_errors.shape[1]):
                out.append({
                    "kind": "fold", "index": g, "lambda_L": lam[0], "lambda_H": lam[1],
                    "lambda_beta": lam[2], "fold": f, "error": self.fold_errors[g, f], "se": "",
                    "size_H": "", "size_beta": "", "rank_L": "",
                    "converged": int(self.converged[g, f]),
                })
        err, se = self.cv_error, self.cv_se
        for g, lam in enumerate(self.grid):
            out.append({
                "kind": "summary", "index": g, "lambda_L": lam[0], "lambda_H": lam[1],
                "lambda_beta": lam[2], "fold": "", "error": err[g], "se": se[g],
                "size_H": self.size_H[g], "size_beta": self.size_beta[g], "rank_L": self.rank_L[g],
                "converged": int(self.converged[g].all()),
            })
        for kind, g in (("best_mse", self.best_mse_index), ("best_1se", self.best_1se_index)):
            lam = self.grid[g]
            out.append({
                "kind": kind, "index": g, "lambda_L": lam[0], "lambda_H": lam[1],
                "lambda_beta": lam[2], "fold": "", "error": err[g], "se": se[g],
                "size_H": self.size_H[g], "size_beta": self.size_beta[g], "rank_L": self.rank_L[g],
                "converged": int(self.converged[g].all()),
            })
        return out

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                 for k, v in r.items()})


def _preference(triple):
    """1se ordering: larger lambda_H first, then lambda_beta, then lambda_L."""
    return (triple[1], triple[2], triple[0])


class _FoldEvaluator:
    """Fits one penalty triple on every fold and scores the held-out cells."""

    def __init__(self, design: Design, folds: CvFolds, penalties: PenaltyConfig):
        self.design = design
        self.folds = folds
        self.penalties = penalties
        self.train = [folds.train_mask(f) for f in range(folds.k)]
        self.evals = [folds.eval_sets[f] for f in range(folds.k)]

    def evaluate(self, lam, warm):
        """Return per-fold errors, convergence flags, sizes and the fitted states."""
        k = self.folds.k
        errors = np.empty(k)
        conv = np.empty(k, dtype=bool)
        sizes = np.empty((k, 3))
        states = []
        n_H = self.design.n_H
        for f in range(k):
            st = warm[f].copy() if warm is not None else _zero_state(self.design)
            _, ok, E = _solve(self.design, self.train[f], lam, st,
                              self.penalties.max_iterations, self.penalties.rel_tolerance)
            r = E[self.evals[f]]
            errors[f] = float(r @ r) / len(r)
            conv[f] = ok
            sizes[f] = (
                np.count_nonzero(np.abs(st.coef[:n_H]) > ZERO_TOL),
                np.count_nonzero(np.abs(st.coef[n_H:]) > ZERO_TOL),
                st.rank if st.rank is not None else 0,
            )
            states.append(st)
        return errors, conv, sizes.mean(axis=0), states


def cv_lambda_max(design: Design, folds: CvFolds) -> LambdaMax:
    """Per-axis bounds, maximized over the training sets so each fold is zeroed."""
    bounds = np.array([lambda_max_design(design, folds.train_mask(f)).astuple() for f in range(folds.k)])
    return LambdaMax(*(float(v) for v in bounds.max(axis=0)))


def cross_validate(
    panel: PanelData,
    grid: Optional[GridSpec] = None,
    k: int = 5,
    seed: int = 0,
    criterion: str = "mse",
    *,
    penalties: Optional[PenaltyConfig] = None,
    standardize: bool = True,
    fixed_effects: bool = True,
    search: str = "grid",
    design: Optional[Design] = None,
    folds: Optional[CvFolds] = None,
) -> CvResult:
    """Grid (optionally refined) search for the CV-optimal penalty triple.

    Parameters
    ----------
    panel : PanelData
    grid : GridSpec, optional
    k, seed : int
        Number of folds and the fold-sampling seed.
    criterion : {"mse", "1se"}
        Criterion reported by :meth:`CvResult.selected`; both optima are
        always computed.
    penalties : PenaltyConfig, optional
        Solver settings (the lambda fields are ignored).
    search : {"grid", "hypercube"}
        ``hypercube`` adds two rounds of per-axis golden-section refinement
        around the incumbent (experimental).

    Returns
    -------
    CvResult
    """
    if criterion not in ("mse", "1se"):
        raise ValueError(f"unknown criterion {criterion!r}")
    grid = grid or GridSpec()
    penalties = penalties or PenaltyConfig()
    if design is None:
        design = Design.build(panel, standardize=standardize, fixed_effects=fixed_effects)
    if folds is None:
        folds = make_folds(panel, k, seed)
    lmax = cv_lambda_max(design, folds)
    axes = [grid.axis("lambda_L", lmax.L), grid.axis("lambda_H", lmax.H),
            grid.axis("lambda_beta", lmax.beta)]

    ev = _FoldEvaluator(design, folds, penalties)
    triples, errs, convs, sizes = [], [], [], []
    states = {}
    # Enumerate lambda_L, lambda_beta, lambda_H in decreasing order; each
    # point warm-starts from its neighbour with the next larger penalty.
    for iL, ib, iH in itertools.product(range(len(axes[0])), range(len(axes[2])), range(len(axes[1]))):
        if iH > 0:
            warm = states.get((iL, ib, iH - 1))
        elif ib > 0:
            warm = states.get((iL, ib - 1, 0))
        elif iL > 0:
            warm = states.get((iL - 1, 0, 0))
        else:
            warm = None
        lam = (axes[0][iL], axes[1][iH], axes[2][ib])
        e, c, s, st = ev.evaluate(lam, warm)
        states[(iL, ib, iH)] = st
        # keep only the warm starts that can still be used
        if iH > 0 and (iL, ib, iH - 1) in states and iH - 1 > 0:
            del states[(iL, ib, iH - 1)]
        triples.append(lam)
        errs.append(e)
        convs.append(c)
        sizes.append(s)

    result = _assemble(triples, errs, convs, sizes, lmax, folds, criterion, ["grid"] * len(triples))
    if search == "hypercube":
        result = _refine(result, ev, axes)
    elif search != "grid":
        raise ValueError(f"unknown search {search!r}")
    n_bad = int((~result.converged).sum())
    if n_bad:
        logger.info("%d of %d fold fits did not converge", n_bad, result.converged.size)
    return result


def _assemble(triples, errs, convs, sizes, lmax, folds, criterion, source):
    order = sorted(range(len(triples)), key=lambda i: tuple(-v for v in triples[i]))
    sizes = np.asarray(sizes, dtype=float).reshape(-1, 3)
    return CvResult(
        grid=np.asarray([triples[i] for i in order], dtype=float).reshape(-1, 3),
        fold_errors=np.asarray([errs[i] for i in order]),
        converged=np.asarray([convs[i] for i in order]),
        size_H=sizes[order, 0],
        size_beta=sizes[order, 1],
        rank_L=sizes[order, 2],
        lambda_max=lmax,
        k=folds.k,
        seed=folds.seed,
        criterion=criterion,
        source=[source[i] for i in order],
    )


def _refine(result: CvResult, ev: _FoldEvaluator, axes, rounds=2, n_eval=4) -> CvResult:
    """Golden-section refinement of each axis around the MSE incumbent."""
    triples = [tuple(t) for t in result.grid]
    errs = list(result.fold_errors)
    convs = list(result.converged)
    sizes = list(np.column_stack([result.size_H, result.size_beta, result.rank_L]))
    source = list(result.source)
    seen = {t: i for i, t in enumerate(triples)}

    def score(lam):
        lam = tuple(float(v) for v in lam)
        if lam in seen:
            return float(np.mean(errs[seen[lam]]))
        e, c, s, _ = ev.evaluate(lam, None)
        seen[lam] = len(triples)
        triples.append(lam)
        errs.append(e)
        convs.append(c)
        sizes.append(s)
        source.append("hypercube")
        return float(e.mean())

    for _ in range(rounds):
        for ax in (1, 2, 0):
            cur = _assemble(triples, errs, convs, sizes, result.lambda_max,
                            ev.folds, result.criterion, source)
            best = list(cur.best_mse)
            vals = np.unique(np.concatenate([axes[ax], [t[ax] for t in triples]]))
            pos = int(np.searchsorted(vals, best[ax]))
            lo = vals[max(pos - 1, 0)]
            hi = vals[min(pos + 1, len(vals) - 1)]
            if hi <= lo:
                continue
            a, b = lo, hi
            for _ in range(n_eval):
                c1 = b - GOLDEN * (b - a)
                c2 = a + GOLDEN * (b - a)
                t1, t2 = list(best), list(best)
                t1[ax], t2[ax] = c1, c2
                if score(t1) <= score(t2):
                    b = c2
                else:
                    a = c1
    return _assemble(triples, errs, convs, sizes, result.lambda_max, ev.folds, result.criterion, source)
