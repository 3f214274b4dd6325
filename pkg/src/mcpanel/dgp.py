"""Simulation data-generating process for the causal panel model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .panel import ModelParams, PanelData


class PsdRepairError(RuntimeError):
    def __init__(self, matrix):
        self.matrix = matrix
        super().__init__(f"covariance repair failed for matrix with eigenvalues {np.linalg.eigvalsh(matrix)}")


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the simulation design.

    Defaults follow the reference design (``N=100, T=80, tau=1, rank_L=5``,
    ``w=0.1``, ...). ``zeta_L`` is the exponential rate for the nonzero
    singular values of ``L``; ``h_size``/``b_size`` are variances of the
    coefficient draws and ``sigma_eps`` is the shock standard deviation.
    """

    N: int = 100
    T: int = 80
    tau: float = 1.0
    rank_L: int = 5
    w: float = 0.1
    sigma_max: float = 0.8
    p: int = 50
    q: int = 20
    h_size: float = 1.0
    h_prob: float = 0.025
    B: int = 1000
    b_size: float = 1.0
    b_prob: float = 0.02
    sigma_eps: float = 1.0
    zeta_L: float = 1.0
    seed: int = 0
    exact_count_bernoulli: bool = False

    def __post_init__(self):
        for name in ("w", "h_prob", "b_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.sigma_max < 1.0:
            raise ValueError("sigma_max must lie in [0, 1)")
        if min(self.N, self.T) < 1:
            raise ValueError("N and T must be positive")
        if min(self.p, self.q, self.B) < 0:
            raise ValueError("covariate counts must be nonnegative")
        if not 0 <= self.rank_L <= min(self.N, self.T):
            raise ValueError(f"rank_L={self.rank_L} exceeds min(N, T)={min(self.N, self.T)}")
        for name in ("h_size", "b_size", "sigma_eps", "zeta_L"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def J(self) -> int:
        return self.B

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown DGP keys: {sorted(unknown)}")
        out = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.type in ("bool", bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                v = int(v)
            else:
                v = float(v)
            out[f.name] = v
        return cls(**out)

    def replace(self, **kw) -> "DgpConfig":
        return replace(self, **kw)


def _activity(rng, size, prob, exact):
    """Bernoulli(prob) indicators, or exactly round(prob * size) ones."""
    n = int(np.prod(size))
    if exact:
        k = int(round(prob * n))
        out = np.zeros(n, dtype=bool)
        out[rng.choice(n, size=k, replace=False)] = True
        return out.reshape(size)
    return rng.random(size) < prob


def random_correlation(rng, dim, sigma_max):
    """Unit-diagonal covariance with U(0, sigma_max) off-diagonals, repaired to PSD.

    The off-diagonal draw is symmetrized, negative eigenvalues are clipped to
    1e-8 and the diagonal is rescaled back to one.
    """
    if dim == 0:
        return np.zeros((0, 0))
    upper = np.triu(rng.uniform(0.0, sigma_max, size=(dim, dim)), k=1)
    S = upper + upper.T + np.eye(dim)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < 0:
        vals = np.clip(vals, 1e-8, None)
        S = (vecs * vals) @ vecs.T
        d = np.sqrt(np.diag(S))
        S = S / np.outer(d, d)
        S = (S + S.T) / 2.0
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() < -1e-10:
        raise PsdRepairError(S)
    return S


def _mvn_rows(rng, n, cov):
    dim = cov.shape[0]
    if dim == 0:
        return np.zeros((n, 0))
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return rng.standard_normal((n, dim)) @ root.T


def generate(config: DgpConfig):
    """Draw one panel.

    Returns
    -------
    panel : PanelData
    truth : ModelParams
    tau : float
    """
    c = config
    rng = np.random.default_rng(c.seed)
    N, T = c.N, c.T

    W = _activity(rng, (N, T), c.w, c.exact_count_bernoulli).astype(int)

    Lp = rng.standard_normal((N, T))
    U, _, Vt = np.linalg.svd(Lp, full_matrices=False)
    sv = np.zeros(min(N, T))
    sv[: c.rank_L] = rng.exponential(1.0 / c.zeta_L, size=c.rank_L)
    L = (U * sv) @ Vt

    Sx = random_correlation(rng, c.p, c.sigma_max)
    X = rng.uniform(0.0, 1.0, size=(N, 1)) * _mvn_rows(rng, N, Sx)
    Sz = random_correlation(rng, c.q, c.sigma_max)
    Z = (rng.uniform(0.0, 1.0, size=(T, 1)) * _mvn_rows(rng, T, Sz)).T

    H = rng.normal(0.0, np.sqrt(c.h_size), size=(c.p, c.q))
    H = H * _activity(rng, (c.p, c.q), c.h_prob, c.exact_count_bernoulli)

    V = rng.standard_normal((N, T, c.B))
    beta = rng.normal(0.0, np.sqrt(c.b_size), size=c.B)
    beta = beta * _activity(rng, (c.B,), c.b_prob, c.exact_count_bernoulli)

    Gamma = rng.standard_normal(N)
    Delta = rng.standard_normal(T)
    shocks = rng.normal(0.0, c.sigma_eps, size=(N, T))

    Y0 = L + X @ H @ Z + V @ beta + Gamma[:, None] + Delta[None, :] + shocks
    Y = c.tau * W + Y0
    truth = ModelParams(L, H, beta, Gamma, Delta)
    return PanelData(Y, W, X, Z, V), truth, float(c.tau)
