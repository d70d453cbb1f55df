"""Closed-form asymptotic metrics computed from converged overlaps.

All integrals are one-dimensional Gaussian expectations in the pre-activation
(score) domain, which stays well defined even when the confidence map is
deterministic (τ̂ = 0) or the self-overlap diverges (metrics then depend only
on m/√q, which stays finite).

With S0 = τ0² + ρ − m²/q (the total variance of the teacher field given the
score, label noise included):

    gen_error = E_ξ[σ_{S0}(−(m/q)|ξ|)],                     ξ ~ N(0, q)
    Δ_ℓ       = ℓ − σ_{S0}((m/q)·σ_{τ̂²}⁻¹(ℓ))
    ECE       = E_ξ[|σ_{τ̂²}(ξ) − σ_{S0}((m/q)ξ)|]
    gen_loss  = E_ξ[Σ_y σ_{S0}(y(m/q)ξ)·softplus(−yξ)]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .scalar_kernel import (gauss_hermite, gauss_legendre, log_sigmoid,
                            smoothed_sigmoid,
                            smoothed_sigmoid_inverse, smoothed_sigmoid_prime)
from .state_evolution import Overlaps

#: Quadrature order for metric integrals; the tail-doubling check at order
#: 300 is exercised in the test suite.
METRIC_ORDER = 150

LEVELS_DEFAULT = (0.6, 0.75, 0.9, 0.95)


def _score_stats(ov: Overlaps):
    """(m/q, √q, S0) with guards for tiny/diverged self-overlap."""
    q = max(ov.q, 1e-14)
    ratio = ov.m / q
    s0 = ov.noise.tau0_sq + max(ov.rho - ov.m ** 2 / q, 0.0)
    return ratio, math.sqrt(q), s0


def gen_error(ov: Overlaps) -> float:
    """Asymptotic misclassification error of sign(score)."""
    ratio, sq, s0 = _score_stats(ov)
    rule = gauss_hermite(METRIC_ORDER)
    xi = sq * rule.nodes
    return float(rule.weights @ smoothed_sigmoid(-ratio * np.abs(xi), s0))


def gen_loss(ov: Overlaps) -> float:
    """Asymptotic test cross-entropy of the prediction σ_{τ̂²}(score).

    For τ̂² = 0 (plain erm) the integrand reduces to the logistic loss
    softplus(−y·score).
    """
    ratio, sq, s0 = _score_stats(ov)
    rule = gauss_hermite(METRIC_ORDER)
    xi = sq * rule.nodes
    hat_sq = ov.hat_tau_sq
    total = 0.0
    for y in (1.0, -1.0):
        z0 = smoothed_sigmoid(y * ratio * xi, s0)
        if hat_sq > 0.0:
            log_pred = np.log(np.clip(smoothed_sigmoid(y * xi, hat_sq), 1e-300, None))
        else:
            log_pred = log_sigmoid(y * xi)
        total += float(rule.weights @ (z0 * (-log_pred)))
    return total


def calibration(level: float, ov: Overlaps) -> float:
    """Calibration gap Δ_ℓ = ℓ − E[f*(x) | f̂(x) = ℓ] at confidence ℓ."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly inside (0, 1)")
    ratio, _, s0 = _score_stats(ov)
    nu = smoothed_sigmoid_inverse(level, ov.hat_tau_sq)
    return level - float(smoothed_sigmoid(ratio * nu, s0))


def ece(ov: Overlaps) -> float:
    """Expected calibration error: E over the confidence marginal of |Δ|."""
    ratio, sq, s0 = _score_stats(ov)
    rule = gauss_hermite(METRIC_ORDER)
    xi = sq * rule.nodes
    conf = smoothed_sigmoid(xi, ov.hat_tau_sq)
    truth = smoothed_sigmoid(ratio * xi, s0)
    return float(rule.weights @ np.abs(conf - truth))


def conditional_variance(level: float, ov_t: Overlaps, ov_bo: Overlaps) -> float:
    """Var of the Bayes-optimal confidence given the estimator's confidence.

    Uses the Gaussian conditional of the Bayes-optimal score given the
    estimator score (cross-covariance m_t by the Nishimori exchangeability)
    and the identity E[f̂_bo | f̂_t = ℓ] = ℓ − Δ_ℓ(t).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly inside (0, 1)")
    q_t = max(ov_t.q, 1e-14)
    nu = smoothed_sigmoid_inverse(level, ov_t.hat_tau_sq)
    mean_a = (ov_t.m / q_t) * nu
    var_a = ov_bo.q - ov_t.m ** 2 / q_t
    if var_a < -1e-10:
        raise ValueError("negative conditional score variance: inconsistent overlaps")
    var_a = max(var_a, 0.0)
    rule = gauss_hermite(METRIC_ORDER)
    a = mean_a + math.sqrt(var_a) * rule.nodes
    second = float(rule.weights @ smoothed_sigmoid(a, ov_bo.hat_tau_sq) ** 2)
    first = level - calibration(level, ov_t)
    out = second - first ** 2
    if out < -1e-10:
        raise ValueError("negative conditional variance: inconsistent overlaps")
    return max(out, 0.0)


def temperature_scale(ov: Overlaps, T: float) -> Overlaps:
    """Score rescaling θ̂ → θ̂/T acting on the overlaps: m → m/T, q → q/T²."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    return replace(ov, m=ov.m / T, q=ov.q / T ** 2,
                   m_hat=ov.m_hat, q_hat=ov.q_hat, v_hat=ov.v_hat)


@dataclass(frozen=True)
class JointDensityParams:
    """Parameters of the asymptotic joint confidence density ρ(a, b).

    ``sigma_cov`` is the 2×2 covariance of the underlying Gaussian pair
    ([[ρ, m],[m, q]] for teacher-vs-estimator, [[q_bo, m],[m, q]] for
    bo-vs-estimator); ``noise_a``/``noise_b`` are the smoothing variances of
    the two confidence maps (noise_b = τ̂² must be positive for a proper
    density — the τ̂ = 0 case is handled in the pre-activation domain by the
    metric functions above, not here).
    """

    sigma_cov: np.ndarray
    noise_a: float
    noise_b: float

    def __post_init__(self) -> None:
        cov = np.asarray(self.sigma_cov, dtype=float)
        if cov.shape != (2, 2) or abs(cov[0, 1] - cov[1, 0]) > 1e-12:
            raise ValueError("sigma_cov must be symmetric 2×2")
        if cov[0, 0] <= 0 or cov[1, 1] <= 0 or np.linalg.det(cov) < -1e-12:
            raise ValueError("sigma_cov must be positive semidefinite")
        if self.noise_a < 0 or self.noise_b <= 0:
            raise ValueError("noise_a ≥ 0 and noise_b > 0 required")


def joint_density(a: float, b: float, params: JointDensityParams) -> float:
    """Asymptotic joint density of the two confidences at (a, b) ∈ (0,1)²."""
    if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
        raise ValueError("confidences must lie strictly inside (0, 1)")
    xa = smoothed_sigmoid_inverse(a, params.noise_a)
    xb = smoothed_sigmoid_inverse(b, params.noise_b)
    cov = np.asarray(params.sigma_cov, dtype=float)
    det = float(np.linalg.det(cov))
    if det <= 0:
        raise ValueError("degenerate covariance: density undefined")
    quad = (cov[1, 1] * xa ** 2 - 2 * cov[0, 1] * xa * xb + cov[0, 0] * xb ** 2) / det
    gauss = math.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))
    ja = float(smoothed_sigmoid_prime(xa, params.noise_a))
    jb = float(smoothed_sigmoid_prime(xb, params.noise_b))
    return gauss / (ja * jb)


@dataclass(frozen=True)
class MetricsRecord:
    """All asymptotic metrics at one fixed point."""

    gen_error: float
    gen_loss: float
    calibration: Mapping[float, float]
    ece: float
    cond_variance: Mapping[float, float]
    hat_tau_sq: float
    overlaps: Overlaps


def metrics_record(ov: Overlaps, levels=LEVELS_DEFAULT,
                   ov_bo: Overlaps | None = None) -> MetricsRecord:
    """Bundle every metric; conditional variances only if a bo point is given."""
    cond = {}
    if ov_bo is not None:
        cond = {l: conditional_variance(l, ov, ov_bo) for l in levels}
    return MetricsRecord(
        gen_error=gen_error(ov),
        gen_loss=gen_loss(ov),
        calibration={l: calibration(l, ov) for l in levels},
        ece=ece(ov),
        cond_variance=cond,
        hat_tau_sq=ov.hat_tau_sq,
        overlaps=ov,
    )


def oracle_error(tau0_sq: float, rho: float = 1.0) -> float:
    """Misclassification error of the Bayes oracle sign(f* − ½).

    err = 2 ∫_0^∞ σ_{τ0²}(−t) N(t | 0, ρ) dt; integrating on the half-line
    sidesteps the |t| kink that slows Gauss-Hermite convergence.
    """
    sd = math.sqrt(rho)
    rule = gauss_legendre(0.0, 14.0 * sd, 300)
    t = rule.nodes
    dens = np.exp(-0.5 * t ** 2 / rho) / math.sqrt(2.0 * math.pi * rho)
    return 2.0 * float(rule.weights @ (smoothed_sigmoid(-t, tau0_sq) * dens))
