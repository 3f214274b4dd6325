"""Penalized matrix-completion estimator with l1 covariate selection.

The estimator minimizes

    (1/n) ||P(Y - L - XHZ - [V_it' beta] - Gamma 1' - 1 Delta')||_F^2
        + lambda_L ||L||_* + lambda_H ||H||_1 + lambda_beta ||beta||_1

by block-coordinate descent, where ``P`` is the identity on the full panel
(``imposed_null``) or the projection onto untreated cells (``control_only``)
and ``n`` is the number of cells ``P`` keeps. Fixed effects are unpenalized.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import _kernels
from .panel import (
    ZERO_TOL,
    ModelParams,
    PanelData,
    Scaling,
    identity_scaling,
    standardize as standardize_panel,
    validate,
)
from .prox import hard_rank_projection, numerical_rank, svt_factors

logger = logging.getLogger(__name__)

FE_MAX_PASSES = 200
FE_TOL = 1e-14
# alternating passes per outer iteration once the fixed effects are warm
FE_PASSES = 2
# max (fixed effects, coordinate sweep) rounds between soft-impute steps
INNER_ROUNDS = 10
# joint covariate + fixed-effect solves via the Gram matrix up to this many features
GRAM_MAX_FEATURES = 600
GRAM_SWEEPS = 100


class Mode(str, Enum):
    IMPOSED_NULL = "imposed_null"
    CONTROL_ONLY = "control_only"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_").lower())


class EmptyControlSetError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    lambda_L: float = 0.0
    lambda_H: float = 0.0
    lambda_beta: float = 0.0
    max_iterations: int = 500
    rel_tolerance: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_L", "lambda_H", "lambda_beta"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        object.__setattr__(self, "max_iterations", int(self.max_iterations))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")

    @property
    def triple(self):
        return (self.lambda_L, self.lambda_H, self.lambda_beta)

    def with_lambdas(self, lambda_L, lambda_H, lambda_beta) -> "PenaltyConfig":
        return PenaltyConfig(float(lambda_L), float(lambda_H), float(lambda_beta),
                             self.max_iterations, self.rel_tolerance)


@dataclass
class Design:
    """Standardized panel with covariate features flattened to rows of ``D``.

    Row ``p * Q + q`` of ``D`` is ``vec(x_p z_q^T)``; the last ``J`` rows are
    ``vec(V[:, :, j])``. All vectors are row-major flattened N x T cells.
    """

    panel: PanelData
    scaling: Scaling
    D: np.ndarray
    n_H: int
    fixed_effects: bool
    _grams: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, panel: PanelData, standardize=True, fixed_effects=True) -> "Design":
        validate(panel)
        if standardize:
            std, scaling = standardize_panel(panel, center=fixed_effects)
        else:
            std, scaling = panel, identity_scaling(panel)
        N, T = panel.shape
        blocks = []
        if std.P and std.Q:
            blocks.append(np.einsum("ip,qt->pqit", std.X, std.Z).reshape(std.P * std.Q, N * T))
        if std.J:
            blocks.append(np.moveaxis(std.V, 2, 0).reshape(std.J, N * T))
        D = np.ascontiguousarray(np.vstack(blocks)) if blocks else np.zeros((0, N * T))
        return cls(std, scaling, D, std.P * std.Q, fixed_effects)

    @property
    def shape(self):
        return self.panel.shape

    @property
    def K(self) -> int:
        return self.D.shape[0]

    def coef_to_blocks(self, coef):
        p = self.panel
        return coef[: self.n_H].reshape(p.P, p.Q), coef[self.n_H:].copy()

    def blocks_to_coef(self, H, beta):
        return np.concatenate([np.asarray(H, float).ravel(), np.asarray(beta, float)])

    def gram(self, weight: np.ndarray) -> np.ndarray:
        """Weighted Gram matrix of the stacked (covariate, unit, time) features.

        Returns an empty matrix when the feature count exceeds
        `GRAM_MAX_FEATURES`. Results are cached per mask.
        """
        N, T = self.shape
        n_fe = N + T if self.fixed_effects else 0
        Kf = self.K + n_fe
        if Kf == 0 or Kf > GRAM_MAX_FEATURES:
            return np.zeros((0, 0))
        key = weight.tobytes()
        if key not in self._grams:
            K = self.K
            w = weight.ravel()
            G = np.zeros((Kf, Kf))
            Dw = self.D * w
            G[:K, :K] = Dw @ self.D.T
            if self.fixed_effects:
                Dw3 = Dw.reshape(K, N, T)
                G[:K, K:K + N] = Dw3.sum(axis=2)
                G[:K, K + N:] = Dw3.sum(axis=1)
                G[K:K + N, K:K + N] = np.diag(weight.sum(axis=1))
                G[K + N:, K + N:] = np.diag(weight.sum(axis=0))
                G[K:K + N, K + N:] = weight
                G = np.triu(G) + np.triu(G, 1).T
            if len(self._grams) > 16:
                self._grams.clear()
            self._grams[key] = G
        return self._grams[key]

    def free_inverse(self, weight: np.ndarray, free: np.ndarray) -> np.ndarray:
        """Pseudo-inverse of the Gram block of the unpenalized features `free`."""
        key = (weight.tobytes(), free.tobytes())
        if key not in self._grams:
            G = self.gram(weight)
            sub = G[np.ix_(free, free)]
            self._grams[key] = np.linalg.pinv(sub, rcond=1e-12, hermitian=True) if free.size else np.zeros((0, 0))
        return self._grams[key]

    def mask_for(self, mode: Mode) -> np.ndarray:
        if mode is Mode.IMPOSED_NULL:
            return np.ones(self.shape, dtype=bool)
        mask = self.panel.control
        if not mask.any():
            raise EmptyControlSetError("control_only mode requires at least one untreated cell")
        return mask


@dataclass
class _State:
    L: np.ndarray
    coef: np.ndarray
    Gamma: np.ndarray
    Delta: np.ndarray
    nuc: Optional[float] = None
    rank: Optional[int] = None

    def copy(self):
        return _State(self.L.copy(), self.coef.copy(), self.Gamma.copy(), self.Delta.copy(),
                      self.nuc, self.rank)


@dataclass
class FitResult:
    """Outcome of one penalized (or post-selection) fit.

    `params` are on the original covariate scale. `internal` holds the
    same solution on the standardized scale the penalties act on.
    """

    params: ModelParams
    objective_trace: np.ndarray
    converged: bool
    n_iterations: int
    support_H: frozenset
    support_beta: frozenset
    rank_L: int
    mode: Mode
    penalties: PenaltyConfig
    internal: ModelParams = field(repr=False, default=None)
    post: bool = False
    mask: np.ndarray = field(repr=False, default=None)

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1]) if len(self.objective_trace) else float("nan")

    def summary(self) -> dict:
        return {
            "mode": self.mode.value,
            "post": self.post,
            "lambda_L": self.penalties.lambda_L,
            "lambda_H": self.penalties.lambda_H,
            "lambda_beta": self.penalties.lambda_beta,
            "objective": self.objective,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "rank_L": self.rank_L,
            "size_H": len(self.support_H),
            "size_beta": len(self.support_beta),
        }


# --- inner machinery ----------------------------------------------------------


def _residual(design: Design, Yf, st: _State):
    N, T = design.shape
    E = Yf - st.L.ravel() - st.Gamma.repeat(T) - np.tile(st.Delta, N)
    if design.K:
        E = E - st.coef @ design.D
    return E


def _fe_update(E2, mask, row_cnt, col_cnt, st: _State, passes=FE_MAX_PASSES):
    """Block update of (Gamma, Delta) by alternating masked means.

    Each half-pass is an exact minimization, so any number of passes
    decreases the loss; with the default cap it solves the block exactly.
    """
    scale = 1.0 + float(np.abs(E2[mask]).max(initial=0.0))
    for _ in range(passes):
        Em = np.where(mask, E2, 0.0)
        s = np.divide(Em.sum(axis=1), row_cnt, out=np.zeros_like(row_cnt), where=row_cnt > 0)
        st.Gamma += s
        E2 -= s[:, None]
        Em = np.where(mask, E2, 0.0)
        d = np.divide(Em.sum(axis=0), col_cnt, out=np.zeros_like(col_cnt), where=col_cnt > 0)
        st.Delta += d
        E2 -= d[None, :]
        if max(np.abs(s).max(initial=0.0), np.abs(d).max(initial=0.0)) <= FE_TOL * scale:
            break


def _nuclear(L):
    if not L.any():
        return 0.0
    return float(np.linalg.svd(L, compute_uv=False).sum())


def _objective(E, weight, n, st, lam, n_H):
    loss = float(weight @ (E * E)) / n
    pen = lam[0] * (st.nuc if st.nuc is not None else _nuclear(st.L))
    if lam[1]:
        pen += lam[1] * float(np.abs(st.coef[:n_H]).sum())
    if lam[2]:
        pen += lam[2] * float(np.abs(st.coef[n_H:]).sum())
    return loss + pen


def _solve(design: Design, mask: np.ndarray, lam, state: _State, max_iter, tol,
           rank_cap=None, active=None):
    """Block-coordinate descent from `state` (modified in place).

    With `rank_cap` set, the L step is a hard rank-`rank_cap` projection and
    the covariate step is unpenalized over the `active` coordinates only.

    Returns
    -------
    trace : ndarray
        Objective after each outer iteration.
    converged : bool
    E : ndarray
        Flat residual ``Y - Yhat(0)`` on all cells.
    """
    N, T = design.shape
    Yf = design.panel.Y.ravel()
    weight = np.ascontiguousarray(mask, dtype=float)
    n = float(weight.sum())
    row_cnt = weight.sum(axis=1)
    col_cnt = weight.sum(axis=0)
    D = design.D
    n_H = design.n_H

    norm2 = (D * D) @ weight.ravel() if design.K else np.zeros(0)
    if active is not None:
        norm2 = np.where(active, norm2, 0.0)
        state.coef[~active] = 0.0
    thresh = np.empty(design.K)
    thresh[:n_H] = lam[1] * n / 2.0
    thresh[n_H:] = lam[2] * n / 2.0
    if rank_cap is not None:
        thresh[:] = 0.0
    pen_lam = (0.0, 0.0, 0.0) if rank_cap is not None else tuple(float(v) for v in lam)

    G = design.gram(weight)
    if G.shape[0]:
        norm2 = np.diag(G).copy()
        if active is not None:
            norm2[: design.K] = np.where(active, norm2[: design.K], 0.0)
        penalized = np.zeros(G.shape[0], dtype=bool)
        penalized[: design.K] = thresh > 0
        free = np.flatnonzero(~penalized & (norm2 > 0))
        P = design.free_inverse(weight, free)
    else:
        free, P = np.zeros(0, dtype=np.int64), np.zeros((0, 0))

    E = _residual(design, Yf, state)
    start = _objective(E, weight.ravel(), n, state, pen_lam, n_H)
    trace = np.empty(int(max_iter))
    state.L = np.ascontiguousarray(state.L, dtype=float)
    E2 = E.reshape(N, T)
    n_iter, converged, nuc, rank = _kernels.block_descent(
        E2, weight, D, norm2, thresh, pen_lam[0], pen_lam[1], pen_lam[2], n_H,
        state.L, state.coef, state.Gamma, state.Delta, row_cnt, col_cnt,
        design.fixed_effects, -1 if rank_cap is None else int(rank_cap),
        int(max_iter), float(tol), FE_MAX_PASSES, FE_PASSES, FE_TOL, ZERO_TOL, start, trace, INNER_ROUNDS, G, GRAM_SWEEPS, free, P,
    )
    state.nuc = nuc
    state.rank = rank
    if design.fixed_effects and N:
        shift = state.Gamma.mean()
        state.Gamma -= shift
        state.Delta += shift
    return trace[:n_iter].copy(), bool(converged), E


def _internal_params(design: Design, st: _State) -> ModelParams:
    H, beta = design.coef_to_blocks(st.coef)
    return ModelParams(st.L.copy(), H, beta, st.Gamma.copy(), st.Delta.copy())


def _state_from_params(design: Design, p: ModelParams) -> _State:
    return _State(p.L.astype(float).copy(), design.blocks_to_coef(p.H, p.beta),
                  p.Gamma.astype(float).copy(), p.Delta.astype(float).copy())


def _zero_state(design: Design) -> _State:
    N, T = design.shape
    return _State(np.zeros((N, T)), np.zeros(design.K), np.zeros(N), np.zeros(T), 0.0)


def _finish(design, st, trace, converged, mode, penalties, mask, post=False) -> FitResult:
    internal = _internal_params(design, st)
    params = design.scaling.to_original(internal, design.panel)
    if not converged:
        warnings.warn(
            f"fit did not converge in {penalties.max_iterations} iterations "
            f"(last objective {trace[-1] if len(trace) else float('nan'):.6g})",
            ConvergenceWarning,
            stacklevel=3,
        )
    return FitResult(
        params=params,
        objective_trace=trace,
        converged=converged,
        n_iterations=len(trace),
        support_H=frozenset(params.support_H()),
        support_beta=frozenset(params.support_beta()),
        rank_L=params.rank_L(),
        mode=mode,
        penalties=penalties,
        internal=internal,
        post=post,
        mask=mask,
    )


def fit_design(design: Design, penalties: PenaltyConfig, mode, mask=None, warm_start=None) -> FitResult:
    """Fit on a prebuilt :class:`Design`; `mask` overrides the mode's cell set."""
    mode = Mode.parse(mode)
    if mask is None:
        mask = design.mask_for(mode)
    if not mask.any():
        raise EmptyControlSetError("no observed cells to fit")
    if warm_start is None:
        st = _zero_state(design)
    elif isinstance(warm_start, FitResult):
        st = _state_from_params(design, warm_start.internal)
    else:
        st = _state_from_params(design, warm_start)
    trace, converged, _ = _solve(design, mask, penalties.triple, st,
                                 penalties.max_iterations, penalties.rel_tolerance)
    return _finish(design, st, trace, converged, mode, penalties, mask)


def fit(panel: PanelData, penalties: PenaltyConfig, mode="imposed_null", *,
        fixed_effects=True, standardize=True, warm_start=None) -> FitResult:
    """Fit the penalized potential-outcome model.

    Parameters
    ----------
    panel : PanelData
    penalties : PenaltyConfig
    mode : {"imposed_null", "control_only"}
        ``imposed_null`` uses all ``N*T`` cells with weight ``1/(NT)``;
        ``control_only`` uses untreated cells with weight ``1/|O|``.
    fixed_effects : bool
        Include the unpenalized unit and time effects.
    standardize : bool
        Standardize covariates before fitting (coefficients are reported on
        the original scale).
    warm_start : FitResult or ModelParams (standardized scale), optional

    Returns
    -------
    FitResult
    """
    design = Design.build(panel, standardize=standardize, fixed_effects=fixed_effects)
    return fit_design(design, penalties, mode, warm_start=warm_start)


def fit_post_design(design: Design, first_stage: FitResult, mode=None, mask=None) -> FitResult:
    mode = first_stage.mode if mode is None else Mode.parse(mode)
    if mask is None:
        mask = first_stage.mask if first_stage.mask is not None else design.mask_for(mode)
    st = _state_from_params(design, first_stage.internal)
    active = np.abs(st.coef) > ZERO_TOL
    rank = int(first_stage.rank_L)
    pen = first_stage.penalties
    trace, converged, _ = _solve(design, mask, (0.0, 0.0, 0.0), st, pen.max_iterations,
                                 pen.rel_tolerance, rank_cap=rank, active=active)
    return _finish(design, st, trace, converged, mode, pen, mask, post=True)


def fit_post(panel: PanelData, first_stage: FitResult, mode=None, *, fixed_effects=True,
             standardize=True) -> FitResult:
    """Unpenalized refit on the first stage's covariate support and rank.

    Coefficients outside the first-stage supports stay at zero and ``L`` is
    restricted to rank ``first_stage.rank_L`` through a hard-truncated SVD.
    Starts from the first-stage solution, so the unpenalized loss can only
    decrease.
    """
    design = Design.build(panel, standardize=standardize, fixed_effects=fixed_effects)
    return fit_post_design(design, first_stage, mode)


# --- penalty upper bounds -----------------------------------------------------


@dataclass(frozen=True)
class LambdaMax:
    L: float
    H: float
    beta: float

    def astuple(self):
        return (self.L, self.H, self.beta)


def _fe_residual(design: Design, mask):
    st = _zero_state(design)
    E = _residual(design, design.panel.Y.ravel(), st)
    if design.fixed_effects:
        _fe_update(E.reshape(design.shape), mask, mask.sum(1).astype(float),
                   mask.sum(0).astype(float), st)
    return E


def lambda_max_design(design: Design, mask) -> LambdaMax:
    """Smallest penalties that zero each block, residuals from a fixed-effects-only fit."""
    n = float(mask.sum())
    E = _fe_residual(design, mask)
    R = np.where(mask, E.reshape(design.shape), 0.0)
    lam_L = 2.0 / n * float(np.linalg.svd(R, compute_uv=False).max(initial=0.0))
    if design.K:
        corr = np.abs(_kernels.masked_correlations(design.D, E, mask.ravel().astype(float)))
    else:
        corr = np.zeros(0)
    lam_H = 2.0 / n * float(corr[: design.n_H].max(initial=0.0))
    lam_b = 2.0 / n * float(corr[design.n_H:].max(initial=0.0))
    return LambdaMax(lam_L, lam_H, lam_b)


def lambda_max(panel: PanelData, mode="imposed_null", *, fixed_effects=True, standardize=True) -> LambdaMax:
    design = Design.build(panel, standardize=standardize, fixed_effects=fixed_effects)
    return lambda_max_design(design, design.mask_for(Mode.parse(mode)))


def lambda_max_L(panel, mode="imposed_null", **kw) -> float:
    return lambda_max(panel, mode, **kw).L


def lambda_max_H(panel, mode="imposed_null", **kw) -> float:
    return lambda_max(panel, mode, **kw).H


def lambda_max_beta(panel, mode="imposed_null", **kw) -> float:
    return lambda_max(panel, mode, **kw).beta


# --- optimality certificate ---------------------------------------------------


def kkt_violations(design: Design, result: FitResult) -> dict:
    """Maximum violation of each block's first-order optimality condition.

    Checked on the standardized problem the penalties act on:

    * ``H``/``beta``: ``|g_k| <= lambda`` at zero coefficients and
      ``g_k == lambda * sign(c_k)`` at nonzero ones, with
      ``g_k = (2/n) <P(feature_k), P(residual)>``.
    * ``L``: fixed point of the soft-impute step.
    * fixed effects: zero masked row and column residual sums (scaled by 2/n).
    """
    mask = result.mask
    lam_L, lam_H, lam_b = result.penalties.triple
    st = _state_from_params(design, result.internal)
    E = _residual(design, design.panel.Y.ravel(), st)
    n = float(mask.sum())
    weight = mask.ravel().astype(float)
    out = {}
    if design.K:
        g = 2.0 / n * _kernels.masked_correlations(design.D, E, weight)
        lam = np.where(np.arange(design.K) < design.n_H, lam_H, lam_b)
        nz = np.abs(st.coef) > ZERO_TOL
        viol = np.where(nz, np.abs(g - lam * np.sign(st.coef)), np.maximum(np.abs(g) - lam, 0.0))
        out["H"] = float(viol[: design.n_H].max(initial=0.0))
        out["beta"] = float(viol[design.n_H:].max(initial=0.0))
    else:
        out["H"] = out["beta"] = 0.0
    E2 = E.reshape(design.shape)
    target = np.where(mask, E2 + st.L, st.L)
    if result.post:
        L_fp = hard_rank_projection(target, result.rank_L).reconstruct()
    else:
        L_fp = svt_factors(target, lam_L * n / 2.0).reconstruct()
    out["L"] = float(np.abs(L_fp - st.L).max(initial=0.0))
    if design.fixed_effects:
        Em = np.where(mask, E2, 0.0)
        out["fixed_effects"] = 2.0 / n * float(max(np.abs(Em.sum(1)).max(), np.abs(Em.sum(0)).max()))
    else:
        out["fixed_effects"] = 0.0
    return out


def residual_matrix(design: Design, result: FitResult) -> np.ndarray:
    """Tracked working residual ``Y - Yhat(0)`` on all cells."""
    st = _state_from_params(design, result.internal)
    return _residual(design, design.panel.Y.ravel(), st).reshape(design.shape)
