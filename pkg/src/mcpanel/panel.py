"""Panel containers, validation, outcome prediction and covariate scaling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .prox import numerical_rank

# |value| <= ZERO_TOL counts as zero for supports and rank reporting.
ZERO_TOL = 1e-10


class PanelValidationError(ValueError):
    """Invalid panel input (shape, treatment coding or non-finite values)."""


def _names(names, n, prefix):
    if names is None:
        return tuple(f"{prefix}{k}" for k in range(n))
    names = tuple(str(s) for s in names)
    if len(names) != n:
        raise PanelValidationError(f"expected {n} {prefix} names, got {len(names)}")
    return names


@dataclass(frozen=True, eq=False)
class PanelData:
    """An N x T panel with treatment mask and three covariate blocks.

    Parameters
    ----------
    Y : ndarray, shape (N, T)
        Realized outcomes.
    W : ndarray, shape (N, T)
        Binary treatment indicator.
    X : ndarray, shape (N, P), optional
        Unit covariates.
    Z : ndarray, shape (Q, T), optional
        Time covariates.
    V : ndarray, shape (N, T, J), optional
        Unit-time covariates.
    """

    Y: np.ndarray
    W: np.ndarray
    X: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    x_names: Optional[Sequence[str]] = None
    z_names: Optional[Sequence[str]] = None
    v_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise PanelValidationError(f"Y must be 2-D, got shape {Y.shape}")
        N, T = Y.shape
        X = np.zeros((N, 0)) if self.X is None else np.asarray(self.X, dtype=float)
        Z = np.zeros((0, T)) if self.Z is None else np.asarray(self.Z, dtype=float)
        V = np.zeros((N, T, 0)) if self.V is None else np.asarray(self.V, dtype=float)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "W", np.asarray(self.W))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "V", V)

    @property
    def shape(self):
        return self.Y.shape

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def Q(self) -> int:
        return self.Z.shape[0]

    @property
    def J(self) -> int:
        return self.V.shape[2]

    @cached_property
    def treated(self) -> np.ndarray:
        """Boolean mask of the treated set M."""
        return np.asarray(self.W) == 1

    @cached_property
    def control(self) -> np.ndarray:
        """Boolean mask of the control set O."""
        return ~self.treated

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return int(self.control.sum())

    @cached_property
    def covariate_names(self):
        return (
            _names(self.x_names, self.P, "x"),
            _names(self.z_names, self.Q, "z"),
            _names(self.v_names, self.J, "v"),
        )


def _first_bad(mask):
    idx = np.argwhere(mask)[0]
    return tuple(int(k) for k in idx)


def validate(panel: PanelData) -> PanelData:
    """Check panel invariants and return the panel unchanged.

    Raises
    ------
    PanelValidationError
        On dimension mismatch, non-binary treatment or non-finite entries;
        the message names the first offending cell.
    """
    N, T = panel.Y.shape
    if panel.W.shape != (N, T):
        raise PanelValidationError(f"dimension mismatch: W has shape {panel.W.shape}, expected {(N, T)}")
    if panel.X.ndim != 2 or panel.X.shape[0] != N:
        raise PanelValidationError(f"dimension mismatch: X has {panel.X.shape[0]} rows, expected N={N}")
    if panel.Z.ndim != 2 or panel.Z.shape[1] != T:
        raise PanelValidationError(f"dimension mismatch: Z has {panel.Z.shape[1]} columns, expected T={T}")
    if panel.V.ndim != 3 or panel.V.shape[:2] != (N, T):
        raise PanelValidationError(f"dimension mismatch: V has panel dims {panel.V.shape[:2]}, expected {(N, T)}")

    W = np.asarray(panel.W)
    try:
        bad = ~np.isin(W, (0, 1))
    except TypeError:
        raise PanelValidationError("treatment matrix must be numeric") from None
    if bad.any():
        i, t = _first_bad(bad)
        raise PanelValidationError(f"non-binary treatment at ({i}, {t}): {W[i, t].item()!r}")

    for name in ("Y", "X", "Z", "V"):
        a = getattr(panel, name)
        nonfinite = ~np.isfinite(a)
        if nonfinite.any():
            raise PanelValidationError(f"non-finite value in {name} at {_first_bad(nonfinite)}")
    panel.covariate_names  # checks name lengths
    _ = panel.treated, panel.control
    return panel


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Potential-outcome model parameters ``(L, H, beta, Gamma, Delta)``."""

    L: np.ndarray
    H: np.ndarray
    beta: np.ndarray
    Gamma: np.ndarray
    Delta: np.ndarray

    @classmethod
    def zeros(cls, N, T, P=0, Q=0, J=0) -> "ModelParams":
        return cls(np.zeros((N, T)), np.zeros((P, Q)), np.zeros(J), np.zeros(N), np.zeros(T))

    @classmethod
    def zeros_like_panel(cls, panel: PanelData) -> "ModelParams":
        return cls.zeros(panel.N, panel.T, panel.P, panel.Q, panel.J)

    def copy(self) -> "ModelParams":
        return ModelParams(*(np.array(a, dtype=float, copy=True) for a in self.astuple()))

    def astuple(self):
        return (self.L, self.H, self.beta, self.Gamma, self.Delta)

    def scaled(self, alpha: float) -> "ModelParams":
        return ModelParams(*(alpha * np.asarray(a) for a in self.astuple()))

    def rank_L(self) -> int:
        if self.L.size == 0:
            return 0
        s = np.linalg.svd(self.L, compute_uv=False)
        return numerical_rank(s, atol=ZERO_TOL)

    def support_H(self):
        return {(int(p), int(q)) for p, q in np.argwhere(np.abs(self.H) > ZERO_TOL)}

    def support_beta(self):
        return {int(j) for j in np.flatnonzero(np.abs(self.beta) > ZERO_TOL)}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.astuple())


def covariate_term(panel: PanelData, H: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``X H Z + [V_it^T beta]_it``."""
    out = panel.X @ H @ panel.Z if panel.P and panel.Q else np.zeros(panel.shape)
    if panel.J:
        out = out + panel.V @ beta
    return out


def predict_y0(panel: PanelData, params: ModelParams) -> np.ndarray:
    """Untreated potential outcome ``L + XHZ + [V_it^T beta] + Gamma 1^T + 1 Delta^T``."""
    N, T = panel.shape
    expected = {
        "L": (N, T),
        "H": (panel.P, panel.Q),
        "beta": (panel.J,),
        "Gamma": (N,),
        "Delta": (T,),
    }
    for name, shape in expected.items():
        got = np.shape(getattr(params, name))
        if got != shape:
            raise PanelValidationError(f"dimension mismatch: params.{name} has shape {got}, expected {shape}")
    return (
        params.L
        + covariate_term(panel, params.H, params.beta)
        + params.Gamma[:, None]
        + params.Delta[None, :]
    )


def augment_linear_terms(panel: PanelData) -> PanelData:
    """Append identity blocks so ``H`` also carries linear unit and time terms.

    ``X`` becomes ``[X | I_N]`` and ``Z`` becomes ``[Z; I_T]``. Not idempotent:
    applying it twice appends a second pair of identity blocks.
    """
    N, T = panel.shape
    x_names, z_names, _ = panel.covariate_names
    return replace(
        panel,
        X=np.hstack([panel.X, np.eye(N)]),
        Z=np.vstack([panel.Z, np.eye(T)]),
        x_names=x_names + tuple(f"unit_{i}" for i in range(N)),
        z_names=z_names + tuple(f"time_{t}" for t in range(T)),
    )


# --- covariate standardization -------------------------------------------------


def _center_scale(a, axis, center):
    mean = a.mean(axis=axis) if center else np.zeros(np.delete(a.shape, axis))
    n = a.shape[axis]
    sd = a.std(axis=axis, ddof=1) if n > 1 else np.zeros_like(mean)
    if not center:
        # scale-only mode keeps the raw origin; use the root mean square
        sd = np.sqrt((a ** 2).mean(axis=axis))
    return mean, sd


@dataclass(frozen=True, eq=False)
class Scaling:
    """Affine covariate transform and its exact parameter back-transform.

    With ``X = a + s * Xs`` (per column), ``Z = b + r * Zs`` (per row) and
    ``V = c + u * Vs`` (per slice), the standardized coefficients satisfy
    ``H = Hs / (s r^T)`` and ``beta = beta_s / u``; the centering shifts move
    into the fixed effects.
    """

    x_keep: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    z_keep: np.ndarray
    z_mean: np.ndarray
    z_scale: np.ndarray
    v_keep: np.ndarray
    v_mean: np.ndarray
    v_scale: np.ndarray
    shape: tuple = field(default=(0, 0, 0))  # full (P, Q, J)

    def _shifts(self, Hs, betas, Xs, Zs):
        a = self.x_mean[self.x_keep] / self.x_scale[self.x_keep]
        b = self.z_mean[self.z_keep] / self.z_scale[self.z_keep]
        c = self.v_mean[self.v_keep] / self.v_scale[self.v_keep]
        g = Xs @ (Hs @ b) if Hs.size else np.zeros(Xs.shape[0])
        d = (a @ Hs) @ Zs if Hs.size else np.zeros(Zs.shape[1])
        k = float(a @ Hs @ b) if Hs.size else 0.0
        return g, d + k + float(c @ betas)

    def to_original(self, std: ModelParams, std_panel: PanelData) -> ModelParams:
        """Map parameters fitted on the standardized panel to original covariates."""
        P, Q, J = self.shape
        H = np.zeros((P, Q))
        sx = self.x_scale[self.x_keep]
        sz = self.z_scale[self.z_keep]
        H[np.ix_(self.x_keep, self.z_keep)] = std.H / np.outer(sx, sz)
        beta = np.zeros(J)
        beta[self.v_keep] = std.beta / self.v_scale[self.v_keep]
        g, d = self._shifts(std.H, std.beta, std_panel.X, std_panel.Z)
        return ModelParams(std.L.copy(), H, beta, std.Gamma - g, std.Delta - d)

    def to_standardized(self, params: ModelParams, std_panel: PanelData) -> ModelParams:
        """Inverse of :meth:`to_original` (coefficients on dropped covariates are lost)."""
        sx = self.x_scale[self.x_keep]
        sz = self.z_scale[self.z_keep]
        Hs = params.H[np.ix_(self.x_keep, self.z_keep)] * np.outer(sx, sz)
        betas = params.beta[self.v_keep] * self.v_scale[self.v_keep]
        g, d = self._shifts(Hs, betas, std_panel.X, std_panel.Z)
        return ModelParams(params.L.copy(), Hs, betas, params.Gamma + g, params.Delta + d)


def standardize(panel: PanelData, center: bool = True):
    """Center and scale covariates to unit sample standard deviation.

    Constant covariates are dropped with a warning. With ``center=False``
    covariates are only rescaled (by their root mean square), which keeps the
    model exact when fixed effects are disabled.

    Returns
    -------
    std_panel : PanelData
    scaling : Scaling
    """
    x_names, z_names, v_names = panel.covariate_names
    P, Q, J = panel.P, panel.Q, panel.J

    xm, xs = _center_scale(panel.X, 0, center)
    zm, zs = _center_scale(panel.Z, 1, center)
    if J:
        flat = panel.V.reshape(-1, J)
        vm, vs = _center_scale(flat, 0, center)
    else:
        vm, vs = np.zeros(0), np.zeros(0)

    keeps = []
    for label, names, sd in (("X", x_names, xs), ("Z", z_names, zs), ("V", v_names, vs)):
        keep = sd > 1e-12 * max(1.0, float(np.max(sd, initial=0.0)))
        dropped = [names[k] for k in np.flatnonzero(~keep)]
        if dropped:
            warnings.warn(
                f"dropping constant {label} covariates {dropped}: collinear with fixed effects",
                stacklevel=3,
            )
        keeps.append(keep)
    xk, zk, vk = keeps

    Xs = (panel.X[:, xk] - xm[xk]) / xs[xk]
    Zs = (panel.Z[zk, :] - zm[zk, None]) / zs[zk, None]
    Vs = (panel.V[:, :, vk] - vm[vk]) / vs[vk] if J else panel.V
    std_panel = PanelData(
        panel.Y,
        panel.W,
        Xs,
        Zs,
        Vs,
        x_names=[n for n, k in zip(x_names, xk) if k],
        z_names=[n for n, k in zip(z_names, zk) if k],
        v_names=[n for n, k in zip(v_names, vk) if k],
    )
    scaling = Scaling(xk, xm, np.where(xk, xs, 1.0), zk, zm, np.where(zk, zs, 1.0),
                      vk, vm, np.where(vk, vs, 1.0), shape=(P, Q, J))
    return std_panel, scaling


def identity_scaling(panel: PanelData) -> Scaling:
    P, Q, J = panel.P, panel.Q, panel.J
    return Scaling(
        np.ones(P, bool), np.zeros(P), np.ones(P),
        np.ones(Q, bool), np.zeros(Q), np.ones(Q),
        np.ones(J, bool), np.zeros(J), np.ones(J),
        shape=(P, Q, J),
    )
