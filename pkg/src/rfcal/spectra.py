"""Activation Gaussian moments and the spectral law of the feature Gram matrix.

Provides the moments (κ0, κ1, κ*) of an activation under a standard Gaussian
input, the Marchenko-Pastur (or empirical) spectral law μ of FFᵀ/d together
with spectral integration E_{x~μ}[h(x)], and the effective mismatch noise
τ_add².

Conventions: the feature matrix F has i.i.d. standard Gaussian entries,
inputs are x ~ N(0, I_d/d), features are φ(Fx)/√p with φ centered so κ0 = 0.
μ is the spectral law of FFᵀ/d, whose bulk is the mean-1 Marchenko-Pastur law
with ratio γ = p/d and whose atom at 0 has mass max(0, 1 - 1/γ).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf as _erf

from .scalar_kernel import gauss_legendre



@dataclass(frozen=True)
class Activation:
    """Pointwise activation with finite Gaussian moments."""

    kind: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, z):
        return self.fn(z)


_BUILTINS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "erf": lambda z: _erf(z),
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
    "sign": np.sign,
    "linear": lambda z: z,
}


def activation(kind: str) -> Activation:
    """Look up a built-in activation by name."""
    try:
        return Activation(kind=kind, fn=_BUILTINS[kind])
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; "
                         f"choose from {sorted(_BUILTINS)}") from None


def activation_moments(act: Activation) -> tuple[float, float, float]:
    """Gaussian moments (κ0, κ1, κ*) of an activation.

    κ0 = E[φ(Z)], κ1 = E[Zφ(Z)], κ*² = E[φ²] − κ1² − κ0² with Z ~ N(0,1);
    computed by adaptive quadrature (accurate also for kinked or
    discontinuous activations such as relu and sign, where fixed
    Gauss-Hermite rules converge slowly).  κ* is invariant under the
    centering φ → φ − κ0 applied downstream.
    """
    from scipy.integrate import quad

    def gauss_mean(f) -> float:
        def integrand(z):
            return f(z) * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        val = 0.0
        for a, b in ((-12.0, 0.0), (0.0, 12.0)):   # split at the likely kink
            part, err = quad(integrand, a, b, limit=200)
            if not math.isfinite(part):
                raise ValueError("activation has non-finite Gaussian moments")
            val += part
        return val

    k0 = gauss_mean(lambda z: float(act(z)))
    k1 = gauss_mean(lambda z: z * float(act(z)))
    second = gauss_mean(lambda z: float(act(z)) ** 2)
    kstar_sq = second - k1 * k1 - k0 * k0
    if kstar_sq < -1e-12:
        raise ValueError("negative κ*²: activation moments are inconsistent")
    return k0, k1, math.sqrt(max(kstar_sq, 0.0))


@dataclass(frozen=True)
class EffectiveNoise:
    """Label noise τ0² and ρ-scaled feature-mismatch noise ρ·τ_add²."""

    tau0_sq: float
    tau_add_sq: float
    rho: float = 1.0

    def __post_init__(self) -> None:
        if self.tau0_sq < 0 or self.tau_add_sq < -1e-12 or self.rho <= 0:
            raise ValueError("invalid effective noise parameters")

    @property
    def total_sq(self) -> float:
        """Total extra smoothing variance τ0² + ρ·τ_add²."""
        return self.tau0_sq + self.rho * max(self.tau_add_sq, 0.0)


@dataclass(frozen=True)
class SpectralModel:
    """Activation moments plus a quadrature-ready spectral law μ.

    The law is stored as bulk nodes/weights (weights summing to the bulk
    mass) plus an atom at 0; ``spectral_integrate`` consumes it directly.
    """

    kappa0: float
    kappa1: float
    kappa_star: float
    gamma: float
    bulk_nodes: np.ndarray
    bulk_weights: np.ndarray
    atom_mass: float
    law: str = "marchenko-pastur"

    def omega(self, x):
        """Eigenvalue map ω(x) = κ1²x + κ*² of the feature covariance."""
        return self.kappa1 ** 2 * np.asarray(x, dtype=float) + self.kappa_star ** 2


def marchenko_pastur_model(act: Activation | str, gamma: float,
                           order: int = 400) -> SpectralModel:
    """Spectral model with the closed-form Marchenko-Pastur law of ratio γ.

    The bulk density √((λ₊−x)(x−λ₋))/(2πγx) on [(1−√γ)², (1+√γ)²] is mapped
    through x = c + r·sinθ so that the square-root edges become smooth and a
    Gauss-Legendre rule in θ converges spectrally.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(act, str):
        act = activation(act)
    k0, k1, ks = activation_moments(act)
    sq = math.sqrt(gamma)
    lam_minus, lam_plus = (1.0 - sq) ** 2, (1.0 + sq) ** 2
    c, r = 0.5 * (lam_plus + lam_minus), 0.5 * (lam_plus - lam_minus)
    theta = gauss_legendre(-0.5 * math.pi, 0.5 * math.pi, order)
    x = c + r * np.sin(theta.nodes)
    w = theta.weights * (r * np.cos(theta.nodes)) ** 2 / (2.0 * math.pi * gamma * x)
    atom = max(0.0, 1.0 - 1.0 / gamma)
    return SpectralModel(kappa0=k0, kappa1=k1, kappa_star=ks, gamma=gamma,
                         bulk_nodes=x, bulk_weights=w, atom_mass=atom,
                         law="marchenko-pastur")


def empirical_model(act: Activation | str, gamma: float,
                    eigenvalues: np.ndarray, zero_tol: float = 1e-10) -> SpectralModel:
    """Spectral model from an explicit eigenvalue sample of FFᵀ/d."""
    if isinstance(act, str):
        act = activation(act)
    k0, k1, ks = activation_moments(act)
    eig = np.sort(np.asarray(eigenvalues, dtype=float))
    zero = eig < zero_tol
    bulk = eig[~zero]
    n = len(eig)
    return SpectralModel(kappa0=k0, kappa1=k1, kappa_star=ks, gamma=gamma,
                         bulk_nodes=bulk, bulk_weights=np.full(len(bulk), 1.0 / n),
                         atom_mass=float(np.sum(zero)) / n, law="empirical")


def load_empirical_model(act: Activation | str, gamma: float, path) -> SpectralModel:
    """Empirical model from a one-eigenvalue-per-line plain-text file."""
    return empirical_model(act, gamma, np.loadtxt(path, ndmin=1))


def spectral_integrate(model: SpectralModel, h: Callable[[np.ndarray], np.ndarray],
                       bulk_only: bool = False) -> float:
    """∫ h dμ: quadrature/average over the bulk plus h(0) times the atom mass.

    ``bulk_only`` skips the atom; use it for integrands defined by a limit at
    0 (e.g. ratios that vanish there).
    """
    out = float(model.bulk_weights @ np.asarray(h(model.bulk_nodes), dtype=float))
    if not bulk_only and model.atom_mass > 0.0:
        out += model.atom_mass * float(h(np.asarray(0.0)))
    return out


def tau_add(model: SpectralModel) -> float:
    """Effective mismatch noise τ_add (teacher variance lost by the features).

    From the trace definition: τ_add² = 1 − γ·E_μ[κ1²x/ω(x)], where the atom
    at 0 contributes nothing to the expectation (zero eigenvalues carry no
    teacher signal), clamped to [0, 1].  Returns τ_add (not squared).
    """
    k1sq, kssq = model.kappa1 ** 2, model.kappa_star ** 2
    if k1sq == 0.0:
        return 1.0
    if kssq == 0.0:
        # Linear-activation limit: κ1²x/ω(x) → 1 on the bulk.
        captured = model.gamma * float(np.sum(model.bulk_weights))
    else:
        captured = model.gamma * spectral_integrate(
            model, lambda x: k1sq * x / (k1sq * x + kssq), bulk_only=True)
    t2 = 1.0 - captured
    if t2 < -1e-6 or t2 > 1.0 + 1e-6:
        raise ValueError(f"τ_add² = {t2} outside [0, 1]: normalization bug")
    return math.sqrt(min(max(t2, 0.0), 1.0))


def effective_noise(model: SpectralModel, tau0_sq: float, rho: float = 1.0) -> EffectiveNoise:
    """Bundle τ0² with the model's ρ-scaled mismatch noise."""
    return EffectiveNoise(tau0_sq=tau0_sq, tau_add_sq=tau_add(model) ** 2, rho=rho)
