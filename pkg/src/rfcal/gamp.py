"""Generalized approximate message passing on a finite instance.

Produces the estimator mean θ̂ and marginal variances for erm/eb/bo with
Onsager corrections, convergence tracking, and per-iteration overlap
measurement against the state evolution.

The iteration runs in the eigenbasis of FFᵀ/d: with Ω = κ1²FFᵀ/d + κ*²I =
Q diag(ω) Qᵀ, the transformed design Ã = U Q diag(ω^{-1/2}) has asymptotically
i.i.d. N(0, 1/p) entries (Gaussian equivalence), and every estimator's prior
becomes separable with per-mode precisions:

    erm/eb (ℓ2 with strength λ):  π_j = λ/ω_j
    bo (teacher covariance):      π_j = ω_j/(ργκ1² x_j),  π_j = ∞ at x_j = 0

so the vanilla GAMP state evolution of this system is exactly the spectral
fixed point solved by :mod:`rfcal.state_evolution`.  Running GAMP on the raw
feature matrix with a scalar ridge denoiser would still reproduce the ERM
minimizer (any fixed point is a stationary point), but its eb/bo fixed points
are biased because the design's column covariance is ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scalar_kernel import channel_eval
from .spectra import EffectiveNoise, marchenko_pastur_model, tau_add
from .monte_carlo import Dataset, overlaps_emp, rng_for


@dataclass(frozen=True)
class GampOptions:
    max_iter: int = 1000
    tol: float = 1e-7
    damping: float = 0.7
    init_scale: float = 0.1
    onsager: bool = True   # disabling is a deliberate negative control


@dataclass
class PriorDenoiser:
    """Input denoiser: separable ridge or a correlated Gaussian prior N(0, Σ*).

    ``ridge`` accepts a scalar or per-coordinate precision (∞ pins a mode to
    zero); ``gaussian_cov`` performs the dense resolvent solve
    (Σ*⁻¹ + diag A)⁻¹b, well defined for singular Σ* through the equivalent
    form (I + Σ* diag A)⁻¹Σ*b.
    """

    kind: str                       # "ridge" | "gaussian_cov"
    lam: float | np.ndarray = 0.0
    sigma_star: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind == "ridge":
            if np.any(np.asarray(self.lam, dtype=float) <= 0):
                raise ValueError("ridge prior requires positive precision")
        elif self.kind == "gaussian_cov":
            S = self.sigma_star
            if S is None or S.shape[0] != S.shape[1] or np.max(np.abs(S - S.T)) > 1e-8:
                raise ValueError("gaussian_cov prior requires a symmetric Σ*")
            if np.linalg.eigvalsh(S)[0] < -1e-8:
                raise ValueError("gaussian_cov prior requires a PSD Σ*")
        else:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    def denoise(self, b: np.ndarray, A: np.ndarray):
        """Posterior mean/variance given the Gaussian pseudo-observation (b, A)."""
        if np.any(A < 0):
            raise ValueError("A must be componentwise nonnegative")
        if self.kind == "ridge":
            lam = np.asarray(self.lam, dtype=float)
            pinned = np.isinf(lam)
            denom = np.where(pinned, 1.0, lam + A)
            mean = np.where(pinned, 0.0, b / denom)
            var = np.where(pinned, 0.0, 1.0 / denom)
            return mean, var
        S = self.sigma_star
        M = np.linalg.solve(np.eye(S.shape[0]) + S * A[None, :], S)
        return M @ b, np.diag(M).copy()


def prior_denoise(denoiser: PriorDenoiser, b: np.ndarray, A: np.ndarray):
    """Functional alias for :meth:`PriorDenoiser.denoise`."""
    return denoiser.denoise(b, A)


@dataclass
class SpectralBasis:
    """Eigenbasis data of one instance's feature covariance."""

    transform: np.ndarray     # T = Q diag(ω^{-1/2}); θ̂ = T w̃, Ã = U T
    eigenvalues: np.ndarray   # x_j of FFᵀ/d
    omega: np.ndarray         # κ1² x_j + κ*²


def spectral_basis(dataset: Dataset) -> SpectralBasis:
    F = dataset.F
    x, Q = np.linalg.eigh(F @ F.T / F.shape[1])
    x = np.clip(x, 0.0, None)
    omega = dataset.kappa1 ** 2 * x + dataset.kappa_star ** 2
    return SpectralBasis(transform=Q / np.sqrt(omega), eigenvalues=x, omega=omega)


def mode_precisions(dataset: Dataset, estimator: str, lam: float,
                    basis: SpectralBasis) -> np.ndarray:
    """Per-mode prior precisions π_j in the spectral basis."""
    if estimator in ("erm", "eb"):
        if lam <= 0:
            raise ValueError("λ must be positive")
        return lam / basis.omega
    if estimator == "bo":
        p, d = dataset.F.shape
        gamma = p / d
        k1sq = dataset.kappa1 ** 2
        signal = dataset.teacher_norm_sq * gamma * k1sq * basis.eigenvalues
        with np.errstate(divide="ignore"):
            return np.where(signal > 0, basis.omega / np.where(signal > 0, signal, 1.0),
                            np.inf)
    raise ValueError(f"unsupported estimator {estimator!r} for GAMP")


@dataclass
class GampResult:
    theta_hat: np.ndarray       # original feature basis: score = θ̂ᵀφ
    c_hat: np.ndarray           # per-mode posterior variances (spectral basis)
    basis: SpectralBasis
    trace: list                 # per iteration: (iteration, residual, m_emp, q_emp)
    converged: bool
    iterations: int

    def score_variance(self, U: np.ndarray) -> np.ndarray:
        """Posterior predictive score variance s² = Σ_j c̃_j ã_j² per row of U."""
        a = U @ self.basis.transform
        return (a * a) @ self.c_hat


def _make_noise(dataset: Dataset) -> EffectiveNoise:
    p, d = dataset.F.shape
    model = marchenko_pastur_model(dataset.activation, p / d)
    return EffectiveNoise(tau0_sq=dataset.tau0_sq, tau_add_sq=tau_add(model) ** 2,
                          rho=dataset.teacher_norm_sq)


def run_gamp(dataset: Dataset, estimator: str, lam: float = 1e-2,
             opts: GampOptions = GampOptions()) -> GampResult:
    """GAMP iteration for one instance and estimator.

    Channel updates per training row (erm proximal / eb posterior / bo
    posterior with the effective teacher noise), Onsager-corrected means, and
    the separable spectral-basis prior; stops when ‖θ̂⁺−θ̂‖/‖θ̂‖ < tol.
    """
    basis = spectral_basis(dataset)
    A_design = dataset.U_train @ basis.transform
    y = dataset.y_train
    n, p = A_design.shape
    A2 = A_design * A_design
    denoiser = PriorDenoiser(kind="ridge", lam=mode_precisions(dataset, estimator, lam, basis))
    noise = _make_noise(dataset) if estimator == "bo" else None

    w = rng_for(dataset.seed, "gamp-init").normal(scale=opts.init_scale, size=p)
    c = np.full(p, 1.0)
    g = np.zeros(n)
    omega_prev = A_design @ w
    trace = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        V = np.clip(A2 @ c, 1e-12, None)
        omega = A_design @ w - (V * g if opts.onsager else 0.0)
        omega = opts.damping * omega_prev + (1 - opts.damping) * omega
        omega_prev = omega
        ch = channel_eval(estimator, y, omega, V, noise=noise)
        g, dg = np.asarray(ch.value), np.asarray(ch.d_omega)
        A = np.clip(-(A2.T @ dg), 0.0, None)
        b = A_design.T @ g + A * w
        w_new, c_new = denoiser.denoise(b, A)
        res = float(np.linalg.norm(w_new - w) / max(np.linalg.norm(w), 1e-12))
        w = opts.damping * w + (1 - opts.damping) * w_new
        c = opts.damping * c + (1 - opts.damping) * c_new
        theta = basis.transform @ w
        m_emp, q_emp = overlaps_emp(theta, dataset)
        trace.append((it, res, m_emp, q_emp))
        if res > 1e6 or not np.all(np.isfinite(w)):
            raise FloatingPointError(f"GAMP diverged at iteration {it}")
        if res < opts.tol:
            converged = True
            break
    return GampResult(theta_hat=basis.transform @ w, c_hat=c, basis=basis,
                      trace=trace, converged=converged, iterations=it)


def trace_to_csv(result: GampResult, path) -> None:
    """Write the per-iteration trace (iteration, residual, m_emp, q_emp)."""
    with open(path, "w") as fh:
        fh.write("# rfcal-gamp-trace-v1\n")
        fh.write("iteration,residual,m_emp,q_emp\n")
        for row in result.trace:
            fh.write("%d,%.12g,%.12g,%.12g\n" % row)
