"""Average treatment effect on the treated and its rule-of-thumb rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import FitResult, Mode
from .panel import PanelData, predict_y0


@dataclass(frozen=True)
class EffectEstimate:
    atet: float
    atet_rot: float
    n_treated: int
    n_control: int
    mode: Mode


def estimate_atet(panel: PanelData, fit: FitResult) -> EffectEstimate:
    """Mean of ``Y - Yhat(0)`` over treated cells.

    For imposed-null fits the effect is spread over all ``NT`` cells, so the
    rule-of-thumb value rescales by ``NT / |O|``. Control-only fits need no
    correction and report ``atet_rot == atet``.
    """
    treated = panel.treated
    n_m = int(treated.sum())
    n_o = panel.N * panel.T - n_m
    if n_m == 0:
        raise ValueError("ATET is undefined without treated cells")
    if n_o == 0:
        raise ValueError("rule-of-thumb correction is undefined without control cells")
    mode = Mode.parse(fit.mode)
    atet = float((panel.Y - predict_y0(panel, fit.params))[treated].mean())
    rot = atet * panel.N * panel.T / n_o if mode is Mode.IMPOSED_NULL else atet
    return EffectEstimate(atet, rot, n_m, n_o, mode)


def cell_effects(panel: PanelData, fit: FitResult) -> np.ndarray:
    """Per-cell ``Y - Yhat(0)`` on treated cells (NaN elsewhere); diagnostic only."""
    out = np.full(panel.shape, np.nan)
    t = panel.treated
    out[t] = (panel.Y - predict_y0(panel, fit.params))[t]
    return out
