"""One-dimensional hyperparameter selection on the asymptotic objectives.

λ_error and λ_loss minimize the asymptotic test error / test loss of erm;
λ_evidence maximizes the replica log evidence of eb; T* minimizes the test
loss along the temperature-scaling family.  All searches are a coarse
log-grid scan followed by golden-section (derivative-free) refinement —
objectives near the interpolation threshold can have steep flanks, and the
grid guards against multimodality.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import replace

import numpy as np
from scipy.optimize import minimize_scalar

from . import metrics as metrics_mod
from .metrics import MetricsRecord, gen_error, gen_loss, metrics_record, temperature_scale
from .spectra import SpectralModel
from .state_evolution import (Overlaps, ScenarioConfig, default_model,
                              free_energy, solve_fixed_point)

LOG10_LAMBDA_RANGE = (-6.0, 3.0)
GRID_POINTS = 25
CRITERIA = ("error", "loss", "evidence")


def _objective_factory(criterion: str, cfg: ScenarioConfig, model: SpectralModel):
    """(λ, warm-start) → (objective value, overlaps); +∞ on divergence for loss."""
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    estimator = "eb" if criterion == "evidence" else cfg.estimator

    def evaluate(lam: float, init: Overlaps | None):
        point_cfg = replace(cfg, lam=lam, estimator=estimator)
        ov = solve_fixed_point(point_cfg, model, init=init)
        if criterion == "error":
            # Evaluable even in the interpolating regime through m/√q.
            return gen_error(ov), ov
        if criterion == "loss":
            return (math.inf if ov.diverged else gen_loss(ov)), ov
        if ov.diverged:
            return math.inf, ov
        return free_energy(point_cfg, ov, model), ov

    return evaluate, estimator


def optimize_lambda(criterion: str, cfg: ScenarioConfig,
                    model: SpectralModel | None = None
                    ) -> tuple[float, Overlaps, MetricsRecord]:
    """Select λ on a 25-point log grid refined by golden section.

    Returns (λ*, converged overlaps at λ*, metrics record).  Warm-starts the
    fixed points along the scan.  Relative tolerance 1e-4 in λ.
    """
    if model is None:
        model = default_model(cfg)
    evaluate, estimator = _objective_factory(criterion, cfg, model)
    grid = np.logspace(*LOG10_LAMBDA_RANGE, GRID_POINTS)
    values = np.empty(GRID_POINTS)
    states: list[Overlaps | None] = [None] * GRID_POINTS
    init = None
    for i, lam in enumerate(grid):
        values[i], states[i] = evaluate(float(lam), init)
        if not states[i].diverged:
            init = states[i]
    if not np.any(np.isfinite(values)):
        raise RuntimeError("objective diverged on the whole λ grid")
    finite = np.where(np.isfinite(values))[0]
    interior = finite[1:-1] if len(finite) > 2 else finite
    if len(interior) and np.min(values[interior]) > values[finite[0]] + 1e-12 \
            and np.min(values[interior]) > values[finite[-1]] + 1e-12:
        warnings.warn("λ objective appears boundary-dominated; using the grid minimum",
                      stacklevel=2)
    best = int(finite[np.argmin(values[finite])])
    lo = math.log10(grid[max(best - 1, 0)])
    hi = math.log10(grid[min(best + 1, GRID_POINTS - 1)])
    warm = states[best]

    def log_obj(t: float) -> float:
        val, ov = evaluate(10.0 ** t, warm)
        return val

    res = minimize_scalar(log_obj, bounds=(lo, hi), method="bounded",
                          options={"xatol": math.log10(1.0 + 1e-4)})
    lam_star = float(10.0 ** res.x)
    if values[best] < res.fun:   # multimodal guard: keep the global grid best
        lam_star = float(grid[best])
    _, overlaps = evaluate(lam_star, warm)
    return lam_star, overlaps, metrics_record(overlaps)


def optimal_temperature(overlaps: Overlaps, bounds=(0.05, 20.0),
                        tol: float = 1e-6) -> float:
    """T* = argmin of the asymptotic test loss along m → m/T, q → q/T²."""
    res = minimize_scalar(lambda T: gen_loss(temperature_scale(overlaps, T)),
                          bounds=bounds, method="bounded", options={"xatol": tol})
    T = float(res.x)
    if min(T - bounds[0], bounds[1] - T) < 10 * tol:
        warnings.warn("optimal temperature at the search boundary", stacklevel=2)
    return T
