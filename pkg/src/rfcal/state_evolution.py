"""Self-consistent equations for the asymptotic overlaps of each estimator.

Solves the six-variable fixed point (m, q, v, m̂, q̂, v̂) describing the joint
Gaussian statistics of the teacher field s = θ*ᵀx and the estimator score
z = θ̂ᵀφ(Fx)/√p in the proportional limit:

    m = Cov(s, z) = κ1 θ̂ᵀFθ*/(d√p),   q = Var(z) = θ̂ᵀΩθ̂/p,
    ρ = Var(s) = ‖θ*‖²/d,              Ω = κ1²FFᵀ/d + κ*²I.

With ω(x) = κ1²x + κ*² the eigenvalues of Ω on the spectral law μ and
D(x) = π̂(x) + v̂ω(x):

    v = E_μ[ω/D],  q = E_μ[ω(ργm̂²κ1²x + q̂ω)/D²],  m = ργ m̂ E_μ[κ1²x/D]

and, with ξ ~ N(0, q), ω̃ = (m/q)ξ, S0 = ρ − m²/q + τ0² (the variance of the
teacher field given the score, label noise included) and
Z0(y, ω̃) = σ_{S0}(yω̃):

    m̂ = α E_ξ[Σ_y ∂_ω̃Z0 · g],  q̂ = α E_ξ[Σ_y Z0 g²],
    v̂ = −α E_ξ[Σ_y Z0 ∂_ω g],

where g = g_t(y, ξ, v) is the estimator's channel.  The prior strength is
π̂(x) = λ for erm/eb/lap and π̂(x) = ω(x)²/(ργκ1²x) for the Bayes-optimal
prior (the precision eigenvalue of the teacher's covariance projected onto
the feature space); zero modes of the Bayes-optimal prior are pinned and
contribute nothing to the spectral integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .scalar_kernel import (ESTIMATOR_KINDS, channel_eval, gauss_hermite,
                            smoothed_sigmoid, smoothed_sigmoid_prime)
from .spectra import (EffectiveNoise, SpectralModel, effective_noise,
                      marchenko_pastur_model, spectral_integrate, tau_add)

#: Gauss-Hermite order for the ξ-expectations in the hat updates.
XI_ORDER = 150
#: Self-overlap beyond which the fixed point is declared interpolating.
Q_DIVERGENCE = 1e8


@dataclass(frozen=True)
class SolverOptions:
    """Damped fixed-point iteration controls."""

    damping: float = 0.5
    tol: float = 1e-9
    max_iter: int = 10000

    def __post_init__(self) -> None:
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


@dataclass(frozen=True)
class ScenarioConfig:
    """One asymptotic scenario: ratios, noise, regularization, estimator."""

    alpha: float            # n/p
    gamma: float            # p/d
    tau0_sq: float = 0.25
    lam: float = 1e-2
    activation: str = "erf"
    estimator: str = "erm"
    teacher_norm_sq: float = 1.0   # ρ = ‖θ*‖²/d
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.gamma <= 0 or self.tau0_sq < 0:
            raise ValueError("alpha, gamma, tau0_sq must be nonnegative (gamma > 0)")
        if self.estimator not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.lam < 0 or (self.lam == 0 and self.estimator != "erm"):
            raise ValueError("lambda must be positive (erm allows 0 via homotopy)")
        if self.teacher_norm_sq <= 0:
            raise ValueError("teacher_norm_sq must be positive")

    @property
    def p_over_n(self) -> float:
        return 1.0 / self.alpha


@dataclass(frozen=True)
class Overlaps:
    """Sufficient statistics at (or during) a fixed point."""

    m: float
    q: float
    v: float
    m_hat: float
    q_hat: float
    v_hat: float
    rho: float
    noise: EffectiveNoise
    hat_tau_sq: float = 0.0
    estimator: str = "erm"
    converged: bool = False
    diverged: bool = False
    iterations: int = 0
    residual: float = math.inf


def default_model(cfg: ScenarioConfig) -> SpectralModel:
    """Marchenko-Pastur spectral model matching the scenario."""
    return marchenko_pastur_model(cfg.activation, cfg.gamma)


def _prior_eig(cfg: ScenarioConfig, model: SpectralModel):
    """Prior precision π̂ on the bulk nodes and at the atom (may be inf)."""
    if cfg.estimator == "bo":
        k1sq = model.kappa1 ** 2
        omega = model.omega(model.bulk_nodes)
        pi_bulk = omega ** 2 / (cfg.teacher_norm_sq * cfg.gamma * k1sq * model.bulk_nodes)
        return pi_bulk, math.inf
    return np.full_like(model.bulk_nodes, cfg.lam), cfg.lam


class StateEvolution:
    """Precomputed spectral arrays plus the update maps for one scenario."""

    def __init__(self, cfg: ScenarioConfig, model: SpectralModel | None = None):
        self.cfg = cfg
        self.model = model if model is not None else default_model(cfg)
        self.rho = cfg.teacher_norm_sq
        self.noise = effective_noise(self.model, cfg.tau0_sq, self.rho)
        self.x = self.model.bulk_nodes
        self.w = self.model.bulk_weights
        self.omega = self.model.omega(self.x)
        self.k1sq_x = self.model.kappa1 ** 2 * self.x
        self.pi_bulk, self.pi_atom = _prior_eig(cfg, self.model)
        self.atom_mass = self.model.atom_mass
        self.omega_atom = self.model.kappa_star ** 2
        self.xi_rule = gauss_hermite(XI_ORDER)
        # ρ_eff = ρ(1 − τ_add²): the teacher variance visible to the features.
        self.rho_eff = self.rho * (1.0 - self.noise.tau_add_sq)

    # ----- prior side -------------------------------------------------
    def nonhat_update(self, m_hat: float, q_hat: float, v_hat: float):
        """(m̂, q̂, v̂) → (m, q, v) via the spectral integrals."""
        cfg = self.cfg
        D = self.pi_bulk + v_hat * self.omega
        signal = self.rho * cfg.gamma * m_hat ** 2 * self.k1sq_x
        v = float(self.w @ (self.omega / D))
        q = float(self.w @ (self.omega * (signal + q_hat * self.omega) / D ** 2))
        m = self.rho * cfg.gamma * m_hat * float(self.w @ (self.k1sq_x / D))
        if self.atom_mass > 0.0 and math.isfinite(self.pi_atom):
            Da = self.pi_atom + v_hat * self.omega_atom
            v += self.atom_mass * self.omega_atom / Da
            q += self.atom_mass * q_hat * self.omega_atom ** 2 / Da ** 2
        return m, q, v

    # ----- channel side -----------------------------------------------
    def hat_update(self, m: float, q: float, v: float):
        """(m, q, v) → (m̂, q̂, v̂) via the ξ-expectation and the y-sum."""
        cfg = self.cfg
        q = max(q, 1e-14)
        xi = math.sqrt(q) * self.xi_rule.nodes
        wts = self.xi_rule.weights
        ratio = m / q
        s0 = max(self.rho - m * m / q, 1e-14) + cfg.tau0_sq
        m_hat = q_hat = v_hat = 0.0
        for y in (1.0, -1.0):
            z0 = smoothed_sigmoid(y * ratio * xi, s0)
            dz0 = y * smoothed_sigmoid_prime(y * ratio * xi, s0)
            ch = channel_eval(cfg.estimator, y, xi, v, noise=self.noise)
            m_hat += float(wts @ (dz0 * ch.value))
            q_hat += float(wts @ (z0 * ch.value ** 2))
            v_hat -= float(wts @ (z0 * ch.d_omega))
        return cfg.alpha * m_hat, cfg.alpha * q_hat, cfg.alpha * v_hat

    # ----- combined sweep ----------------------------------------------
    def step(self, state, damping: float):
        """One damped full sweep; returns (new_state, residual)."""
        m, q, v, m_hat, q_hat, v_hat = state
        eta = damping
        if self.cfg.alpha > 0:
            nm_hat, nq_hat, nv_hat = self.hat_update(m, q, v)
        else:
            nm_hat = nq_hat = nv_hat = 0.0
        m_hat_d = (1 - eta) * nm_hat + eta * m_hat
        q_hat_d = (1 - eta) * nq_hat + eta * q_hat
        v_hat_d = (1 - eta) * nv_hat + eta * v_hat
        nm, nq, nv = self.nonhat_update(m_hat_d, q_hat_d, v_hat_d)
        m_d = (1 - eta) * nm + eta * m
        q_d = (1 - eta) * nq + eta * q
        v_d = (1 - eta) * nv + eta * v
        # Keep the iterate physical: |m| ≤ √(ρ_eff q).
        cap = math.sqrt(max(self.rho_eff * q_d, 0.0))
        m_d = min(max(m_d, -cap), cap)
        new = (m_d, q_d, v_d, m_hat_d, q_hat_d, v_hat_d)
        res = max(abs(a - b) / max(abs(b), 1e-10) for a, b in zip(new, state))
        return new, res


def solve_fixed_point(cfg: ScenarioConfig, model: SpectralModel | None = None,
                      init: Overlaps | None = None) -> Overlaps:
    """Iterate the damped state evolution to its fixed point.

    Stops when the max componentwise relative change drops below
    ``cfg.solver.tol``.  Damping auto-increases to 0.85 when the q-residual
    oscillates.  A runaway self-overlap (q > 1e8) is reported as a diverged
    (interpolating-regime) state whose metrics remain computable through the
    rescaled variable m/√q.

    ``lam = 0`` for erm is served by a geometric λ-homotopy (1e-1 … 1e-6
    warm-started), returning the λ = 1e-6 endpoint.
    """
    if cfg.lam == 0.0 and cfg.estimator == "erm":
        return solve_lambda_homotopy(cfg, model)
    se = StateEvolution(cfg, model)
    opts = cfg.solver
    if init is not None:
        state = (init.m, init.q, init.v, init.m_hat, init.q_hat, init.v_hat)
    else:
        m, q, v = 0.1, 0.5, 1.0
        m_hat, q_hat, v_hat = se.hat_update(m, q, v) if cfg.alpha > 0 else (0.0, 0.0, 0.0)
        state = (m, q, v, m_hat, q_hat, v_hat)
    damping = opts.damping
    res = math.inf
    q_changes = []
    restarts = 0
    for it in range(1, opts.max_iter + 1):
        prev = state
        prev_q = state[1]
        state, res = se.step(state, damping)
        if not all(math.isfinite(s) for s in state) or state[1] < 0 or state[2] < 0:
            # An overshoot can go unphysical (v < 0, NaN) before the
            # Q_DIVERGENCE gate triggers.  Back off and retry with heavier
            # damping; only a persistent failure is treated as divergence
            # (runaway q) or an error (small q: a genuine bug).
            if restarts < 8:
                restarts += 1
                damping = 0.5 * (1.0 + damping)
                state = prev
                continue
            if max(prev_q, state[1] if math.isfinite(state[1]) else 0.0) > 1e3:
                return _finalize(se, (prev[0], max(prev_q, state[1]),
                                      max(prev[2], 0.0),
                                      prev[3], prev[4], prev[5]),
                                 converged=False, diverged=True,
                                 iterations=it, residual=res)
            raise FloatingPointError(
                f"state evolution produced an unphysical iterate at step {it}: {state}")
        if state[1] > Q_DIVERGENCE:
            return _finalize(se, state, converged=False, diverged=True,
                             iterations=it, residual=res)
        q_changes.append(state[1] - prev_q)
        if len(q_changes) >= 3 and damping < 0.85:
            a, b, c = q_changes[-3:]
            if a * b < 0 and b * c < 0:
                damping = 0.85
        if res < opts.tol:
            return _finalize(se, state, converged=True, diverged=False,
                             iterations=it, residual=res)
    return _finalize(se, state, converged=False, diverged=False,
                     iterations=opts.max_iter, residual=res)


def solve_lambda_homotopy(cfg: ScenarioConfig, model: SpectralModel | None = None,
                          schedule=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)) -> Overlaps:
    """λ → 0⁺ limit of erm by geometric continuation with warm starts."""
    ov = None
    for lam in schedule:
        step_cfg = replace(cfg, lam=lam)
        ov = solve_fixed_point(step_cfg, model, init=ov)
        if ov.diverged:
            return ov
    return ov


def _finalize(se: StateEvolution, state, converged: bool, diverged: bool,
              iterations: int, residual: float) -> Overlaps:
    m, q, v, m_hat, q_hat, v_hat = state
    ov = Overlaps(m=m, q=q, v=v, m_hat=m_hat, q_hat=q_hat, v_hat=v_hat,
                  rho=se.rho, noise=se.noise, estimator=se.cfg.estimator,
                  converged=converged, diverged=diverged,
                  iterations=iterations, residual=residual)
    return replace(ov, hat_tau_sq=hat_tau(se.cfg.estimator, ov, se.model, se.cfg.lam))


def hat_tau(estimator: str, overlaps: Overlaps, model: SpectralModel,
            lam: float) -> float:
    """Prediction-noise variance τ̂² of the estimator's confidence map.

    erm → 0; eb → v (posterior score variance); bo → v + τ0² + ρτ_add²;
    lap → E_μ[ω/(λ + v̂ω)] with v̂ from the erm fixed point.
    """
    if estimator == "erm":
        return 0.0
    if estimator == "eb":
        return max(overlaps.v, 0.0)
    if estimator == "bo":
        return max(overlaps.v, 0.0) + overlaps.noise.total_sq
    if estimator == "lap":
        v_hat = overlaps.v_hat
        val = spectral_integrate(model, lambda x: model.omega(x) / (lam + v_hat * model.omega(x)))
        if val < 0:
            raise ValueError("negative Laplace variance: unconverged state")
        return val
    raise ValueError(f"unknown estimator {estimator!r}")


def laplace_overlaps(erm_overlaps: Overlaps, model: SpectralModel, lam: float) -> Overlaps:
    """Laplace estimator statistics: erm score overlaps plus its τ̂²."""
    return replace(erm_overlaps, estimator="lap",
                   hat_tau_sq=hat_tau("lap", erm_overlaps, model, lam))


# ----- free energy -----------------------------------------------------

def psi_w(m_hat: float, q_hat: float, v_hat: float, cfg: ScenarioConfig,
          model: SpectralModel):
    """Prior potential Ψ_w and its gradient (∂m̂, ∂q̂, ∂v̂).

    Ψ_w = ½E_μ[(ργm̂²κ1²x + q̂ω)/D − log D + log π̂], D = π̂ + v̂ω.  Modes
    with infinite prior precision (the Bayes-optimal atom) contribute 0.
    """
    se = StateEvolution(cfg, model)
    rho_gamma = cfg.teacher_norm_sq * cfg.gamma
    D = se.pi_bulk + v_hat * se.omega
    signal = rho_gamma * m_hat ** 2 * se.k1sq_x
    val = 0.5 * float(se.w @ ((signal + q_hat * se.omega) / D
                              - np.log1p(v_hat * se.omega / se.pi_bulk)))
    d_m = rho_gamma * m_hat * float(se.w @ (se.k1sq_x / D))
    d_q = 0.5 * float(se.w @ (se.omega / D))
    d_v = -0.5 * float(se.w @ ((signal + q_hat * se.omega) * se.omega / D ** 2
                               + se.omega / D))
    if se.atom_mass > 0.0 and math.isfinite(se.pi_atom):
        Da = se.pi_atom + v_hat * se.omega_atom
        val += 0.5 * se.atom_mass * (q_hat * se.omega_atom / Da
                                     - math.log1p(v_hat * se.omega_atom / se.pi_atom))
        d_q += 0.5 * se.atom_mass * se.omega_atom / Da
        d_v -= 0.5 * se.atom_mass * (q_hat * se.omega_atom ** 2 / Da ** 2
                                     + se.omega_atom / Da)
    return val, (d_m, d_q, d_v)


def psi_w_grad(m_hat: float, q_hat: float, v_hat: float, estimator: str,
               model: SpectralModel, lam: float, *, gamma: float | None = None,
               teacher_norm_sq: float = 1.0):
    """Gradient of Ψ_w; convenience wrapper around :func:`psi_w`."""
    cfg = ScenarioConfig(alpha=1.0, gamma=gamma if gamma is not None else model.gamma,
                         lam=lam, estimator=estimator,
                         teacher_norm_sq=teacher_norm_sq)
    return psi_w(m_hat, q_hat, v_hat, cfg, model)[1]


def free_energy(cfg: ScenarioConfig, overlaps: Overlaps,
                model: SpectralModel | None = None) -> float:
    """Replica free energy f = −Φ for the posterior estimators (eb, bo).

    Φ = −mm̂ + ½(v̂q + v̂v − q̂v) + Ψ_w + αΨ_y is the per-feature log
    evidence at unit inverse temperature: Φ = 0 at α = 0 (unit prior mass),
    and maximizing Φ over λ yields the evidence-optimal regularization.
    Evaluation away from a stationary point is permitted (used by the
    hyperparameter line search) but only meaningful at a fixed point.
    """
    if cfg.estimator not in ("eb", "bo"):
        raise ValueError("free energy is defined for the posterior estimators (eb, bo)")
    if model is None:
        model = default_model(cfg)
    se = StateEvolution(cfg, model)
    o = overlaps
    val_w, _ = psi_w(o.m_hat, o.q_hat, o.v_hat, cfg, model)
    phi = (-o.m * o.m_hat
           + 0.5 * (o.v_hat * o.q + o.v_hat * o.v - o.q_hat * o.v)
           + val_w + cfg.alpha * _psi_y(se, o.m, o.q, o.v))
    return -phi


def _psi_y(se: StateEvolution, m: float, q: float, v: float) -> float:
    """Channel potential Ψ_y = E_ξ[Σ_y Z0(y, (m/q)ξ)·log Z_g(y, ξ, v)]."""
    cfg = se.cfg
    q = max(q, 1e-14)
    xi = math.sqrt(q) * se.xi_rule.nodes
    wts = se.xi_rule.weights
    s0 = max(se.rho - m * m / q, 1e-14) + cfg.tau0_sq
    total = 0.0
    for y in (1.0, -1.0):
        z0 = smoothed_sigmoid(y * (m / q) * xi, s0)
        ch = channel_eval(cfg.estimator, y, xi, v, noise=se.noise)
        total += float(wts @ (z0 * ch.log_partition))
    return total
