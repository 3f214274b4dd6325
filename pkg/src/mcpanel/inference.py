"""Permutation inference for the sharp null of no treatment effect."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .estimator import FitResult, Mode
from .panel import PanelData, predict_y0

FAMILIES = ("moving_block", "iid")


@dataclass(frozen=True)
class PermutationPlan:
    """Which residual permutations to evaluate.

    ``moving_block`` uses all ``T`` common cyclic time shifts (identity
    first). ``iid`` uses the identity plus `n_perm` uniformly drawn
    bijections of the ``N*T`` cells; when ``(NT)!`` is small enough every
    bijection is enumerated instead.
    """

    family: str
    count: int
    seed: int = 0
    shape: tuple = (0, 0)
    exhaustive: bool = False

    @classmethod
    def build(cls, shape, family="moving_block", n_perm=999, seed=0) -> "PermutationPlan":
        family = family.replace("-", "_")
        if family not in FAMILIES:
            raise ValueError(f"unknown permutation family {family!r}")
        N, T = shape
        if family == "moving_block":
            return cls(family, T, seed, (N, T))
        if n_perm < 0:
            raise ValueError("n_perm must be nonnegative")
        n_cells = N * T
        # compare without computing huge factorials
        feasible = math.factorial(n_cells) if n_cells <= 20 else None
        if feasible is not None and feasible <= n_perm + 1:
            return cls(family, feasible, seed, (N, T), exhaustive=True)
        return cls(family, n_perm + 1, seed, (N, T))

    def cell_permutation(self, index: int) -> np.ndarray:
        """Flat source index for each flat target cell under permutation `index`."""
        if not 0 <= index < self.count:
            raise IndexError(f"permutation index {index} out of range [0, {self.count})")
        N, T = self.shape
        if self.family == "moving_block":
            t = (np.arange(T) + index) % T
            return (np.arange(N)[:, None] * T + t[None, :]).ravel()
        if index == 0:
            return np.arange(N * T)
        if self.exhaustive:
            return np.asarray(next(itertools.islice(itertools.permutations(range(N * T)), index, None)))
        return np.random.default_rng([self.seed, index]).permutation(N * T)


def test_statistic(residuals: np.ndarray, treated: np.ndarray) -> float:
    """Mean absolute residual over the treated cells."""
    treated = np.asarray(treated, dtype=bool)
    if not treated.any():
        raise ValueError("test statistic needs at least one treated cell")
    return float(np.abs(np.asarray(residuals)[treated]).mean())


test_statistic.__test__ = False  # not a pytest test


def permute_residuals(residuals: np.ndarray, plan: PermutationPlan, index: int) -> np.ndarray:
    """Permuted residual matrix; for moving blocks entry ``(i, t)`` takes ``U[i, (t + index) mod T]``."""
    U = np.asarray(residuals, dtype=float)
    if plan.shape != U.shape:
        raise ValueError(f"plan is for shape {plan.shape}, residuals have {U.shape}")
    if plan.family == "moving_block":
        if not 0 <= index < plan.count:
            raise IndexError(f"permutation index {index} out of range [0, {plan.count})")
        return np.roll(U, -index, axis=1)
    return U.ravel()[plan.cell_permutation(index)].reshape(U.shape)


def empirical_cdf(values, x) -> float:
    """``|Pi|^-1 sum 1{S_pi < x}`` (strict)."""
    values = np.asarray(values, dtype=float)
    return float(np.count_nonzero(values < x)) / len(values)


@dataclass(frozen=True)
class InferenceResult:
    statistic: float
    permuted_statistics: np.ndarray
    p_value: float
    family: str = "moving_block"

    @property
    def n_permutations(self) -> int:
        return len(self.permuted_statistics)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "statistic"])
            for i, s in enumerate(self.permuted_statistics):
                w.writerow([i, repr(float(s))])
            w.writerow(["observed", repr(self.statistic)])
            w.writerow(["p_value", repr(self.p_value)])


def permutation_distribution(residuals: np.ndarray, treated: np.ndarray, plan: PermutationPlan) -> InferenceResult:
    """Evaluate the statistic over every planned permutation."""
    treated = np.asarray(treated, dtype=bool)
    U = np.abs(np.asarray(residuals, dtype=float))
    if plan.family == "moving_block":
        stats = np.array([test_statistic(np.roll(U, -s, axis=1), treated) for s in range(plan.count)])
    else:
        flat = U.ravel()
        idx = np.flatnonzero(treated.ravel())
        if plan.exhaustive:
            perms = (np.asarray(p) for p in itertools.permutations(range(flat.size)))
        else:
            perms = (plan.cell_permutation(k) for k in range(plan.count))
        stats = np.array([flat[p[idx]].mean() for p in perms])
    s0 = test_statistic(U, treated)
    p = 1.0 - empirical_cdf(stats, s0)
    return InferenceResult(s0, stats, p, plan.family)


def permutation_p_value(panel: PanelData, fit: FitResult, plan: PermutationPlan) -> InferenceResult:
    """Randomization p-value from the residuals of an imposed-null fit.

    Raises
    ------
    ValueError
        If `fit` was not produced in ``imposed_null`` mode.
    """
    if Mode.parse(fit.mode) is not Mode.IMPOSED_NULL:
        raise ValueError("permutation inference requires an imposed_null fit; refit with mode='imposed_null'")
    if plan.shape != panel.shape:
        raise ValueError(f"plan is for shape {plan.shape}, panel is {panel.shape}")
    residuals = panel.Y - predict_y0(panel, fit.params)
    return permutation_distribution(residuals, panel.treated, plan)
