"""Scalar special functions shared by all other modules.

Numerically stable sigmoid, the Gaussian-smoothed sigmoid and its inverse,
the logistic proximal operator, the per-estimator channel functions with
their analytic omega-derivatives, and Gaussian quadrature rules.

All operations are pure functions; quadrature rules are immutable after
construction and cached, so unrestricted parallel invocation is safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, logsumexp

#: Production quadrature order for all smoothed-sigmoid/channel integrals.
GH_ORDER = 120
#: High-order rule retained as the test oracle.  ``hermgauss`` weights
#: underflow beyond roughly order 350, so this is the practical ceiling.
GH_ORACLE_ORDER = 300

ESTIMATOR_KINDS = ("erm", "bo", "eb", "lap")


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a fixed Gaussian quadrature rule.

    For ``gauss-hermite`` the rule integrates against the standard normal
    density: ``E[f(Z)] = sum(weights * f(nodes))``.  For ``gauss-legendre``
    it integrates ``f`` over an interval ``[a, b]``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: str
    order: int

    def __post_init__(self) -> None:
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("quadrature nodes must be strictly increasing")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")


@lru_cache(maxsize=32)
def gauss_hermite(order: int = GH_ORDER) -> QuadratureRule:
    """Gauss-Hermite rule normalized to the standard Gaussian measure.

    ``sum(weights) == 1`` and ``sum(weights * f(nodes))`` approximates
    ``E[f(Z)]`` for ``Z ~ N(0, 1)``.
    """
    if order > 350:
        raise ValueError("hermgauss weights underflow beyond order ~350")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    nodes = nodes * np.sqrt(2.0)
    weights = weights / np.sqrt(np.pi)
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return QuadratureRule(nodes=nodes, weights=weights, kind="gauss-hermite", order=order)


def gauss_legendre(a: float, b: float, order: int) -> QuadratureRule:
    """Gauss-Legendre rule on ``[a, b]``: ``sum(w * f(x)) ≈ ∫_a^b f``."""
    if not b > a:
        raise ValueError("require b > a")
    nodes, weights = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (b - a) * nodes + 0.5 * (b + a)
    w = 0.5 * (b - a) * weights
    return QuadratureRule(nodes=x, weights=w, kind="gauss-legendre", order=order)


def sigmoid(x):
    """Logistic sigmoid ``1/(1+e^{-x})``, stable for any finite ``x``."""
    return expit(x)


def sigmoid_prime(x):
    """First derivative ``σ'(x) = σ(x)σ(-x)``."""
    s = expit(x)
    return s * expit(-x)


def log_sigmoid(x):
    """``log σ(x)`` computed without overflow (``-softplus(-x)``)."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def _require_variance(v, name: str = "v"):
    """Validate a variance that may be a scalar or an array (per-row V)."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0.0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a finite nonnegative variance, got {v}")
    return float(v) if v.ndim == 0 else v


def _smoothed(kernel, x, v, rule: QuadratureRule | None):
    """``∫ kernel(z) N(z | x, v) dz`` vectorized over both x and v."""
    v = _require_variance(v)
    x = np.asarray(x, dtype=float)
    if np.ndim(v) == 0 and v == 0.0:
        out = kernel(x)
        return out if out.ndim else float(out)
    if rule is None:
        rule = gauss_hermite(GH_ORDER)
    z = x[..., None] + np.sqrt(np.asarray(v))[..., None] * rule.nodes
    out = kernel(z) @ rule.weights
    return out if out.ndim else float(out)


def smoothed_sigmoid(x, v, rule: QuadratureRule | None = None):
    """Gaussian-smoothed sigmoid ``σ_v(x) = ∫ σ(z) N(z | x, v) dz``.

    Reduces to ``σ(x)`` at ``v = 0``.  Vectorized over ``x`` and ``v``.
    """
    return _smoothed(expit, x, v, rule)


def smoothed_sigmoid_prime(x, v, rule: QuadratureRule | None = None):
    """Derivative ``σ_v'(x) = ∫ σ'(z) N(z | x, v) dz`` (w.r.t. ``x``)."""
    return _smoothed(sigmoid_prime, x, v, rule)


def smoothed_sigmoid_second(x, v, rule: QuadratureRule | None = None):
    """Second derivative ``σ_v''(x) = ∫ σ''(z) N(z | x, v) dz``."""
    def kern(z):
        s = expit(z)
        return s * expit(-z) * (1.0 - 2.0 * s)
    return _smoothed(kern, x, v, rule)


def smoothed_sigmoid_inverse(p: float, v: float, tol: float = 1e-12) -> float:
    """Solve ``smoothed_sigmoid(x, v) = p`` for ``x``.

    Monotone bisection bracket (geometrically expanded from ``[-50, 50]``)
    followed by a Newton polish to absolute tolerance ``tol``.
    """
    v = _require_variance(v)
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly inside (0, 1)")
    if p == 0.5:
        return 0.0
    lo, hi = -50.0, 50.0
    while smoothed_sigmoid(lo, v) > p:
        lo *= 2.0
    while smoothed_sigmoid(hi, v) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if smoothed_sigmoid(mid, v) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9:
            break
    x = 0.5 * (lo + hi)
    for _ in range(50):
        f = smoothed_sigmoid(x, v) - p
        df = smoothed_sigmoid_prime(x, v)
        if df <= 0.0:
            break
        step = f / df
        x -= step
        if abs(step) < tol:
            break
    return float(x)


def prox_logistic(y, omega, V):
    """Proximal operator of the logistic loss.

    Returns the unique minimizer ``z`` of ``V·log(1+e^{-yz}) + (z-ω)²/2``,
    i.e. the solution of the stationarity equation ``z = ω + yVσ(-yz)``.
    Vectorized over ``omega`` (and ``V`` of matching shape).
    """
    omega = np.asarray(omega, dtype=float)
    V = np.asarray(V, dtype=float)
    if np.any(V <= 0.0):
        raise ValueError("V must be positive")
    y = np.asarray(y, dtype=float)
    # Work on t = y z with u = y ω: t = u + V σ(-t); root lies in [u, u+V].
    u = y * omega
    t = u + V * expit(-u)
    lo = np.broadcast_to(u, t.shape).copy()
    hi = lo + np.broadcast_to(V, t.shape)
    # Safeguarded Newton (rtsafe): bisect whenever the Newton candidate
    # leaves the bracket or fails to shrink the step geometrically, so a
    # Newton iterate bouncing between the flanks cannot stall.
    dx_old = np.abs(hi - lo)
    for _ in range(200):
        f = t - u - V * expit(-t)
        lo = np.where(f < 0, t, lo)
        hi = np.where(f > 0, t, hi)
        fp = 1.0 + V * sigmoid_prime(t)
        t_new = t - f / fp
        bad = (t_new <= lo) | (t_new >= hi) | (np.abs(2.0 * f) > dx_old * fp)
        t_new = np.where(bad, 0.5 * (lo + hi), t_new)
        dx = np.abs(t_new - t)
        dx_old = dx
        delta = float(np.max(dx))
        t = t_new
        if delta < 1e-15 * (1.0 + float(np.max(np.abs(t)))):
            break
    z = y * t
    return z if z.ndim else float(z)


@dataclass(frozen=True)
class ChannelEval:
    """Value, omega-derivative, and log-partition of a channel function."""

    value: np.ndarray | float
    d_omega: np.ndarray | float
    log_partition: np.ndarray | float | None


def _posterior_channel(y, omega, V_total, rule: QuadratureRule | None):
    """``g = ∂_ω log σ_{V}(yω)`` and its derivative for eb/bo channels.

    Evaluated in log space via logsumexp over the quadrature so that the
    partition ``σ_V(yω)`` cannot underflow for large ``|ω|``.
    """
    if rule is None:
        rule = gauss_hermite(GH_ORDER)
    y = np.asarray(y, dtype=float)
    yw = y * np.asarray(omega, dtype=float)
    V = _require_variance(V_total, "V")
    z = yw[..., None] + np.sqrt(np.asarray(V))[..., None] * rule.nodes
    logw = np.log(rule.weights)
    ls, lsm = log_sigmoid(z), log_sigmoid(-z)   # log σ, log(1 - σ)
    logZ = logsumexp(logw + ls, axis=-1)
    # Z' = Σ w σ(1-σ) and the positive/negative parts of Z'' = Σ w σ'(1-2σ).
    logZp = logsumexp(logw + ls + lsm, axis=-1)
    logB = logsumexp(logw + 2.0 * ls + lsm, axis=-1)
    g = y * np.exp(logZp - logZ)
    dg = np.exp(logZp - logZ) - 2.0 * np.exp(logB - logZ) - np.exp(logZp - logZ) ** 2
    return g, dg, logZ


def channel_eval(estimator: str, y, omega, V, noise=None,
                 rule: QuadratureRule | None = None) -> ChannelEval:
    """Channel function ``g_t(y, ω, V)`` with analytic ``∂_ω g_t``.

    Parameters
    ----------
    estimator:
        ``erm``/``lap`` (proximal channel), ``eb`` (posterior logistic
        likelihood channel), or ``bo`` (posterior channel with the teacher's
        effective noise added to the smoothing variance).
    noise:
        Object exposing ``total_sq`` (τ0² plus the ρ-scaled mismatch noise);
        required for the ``bo`` channel, ignored otherwise.
    """
    if estimator not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {estimator!r}")
    if np.any(np.asarray(V, dtype=float) <= 0.0):
        raise ValueError("V must be positive")
    if estimator in ("erm", "lap"):
        z = prox_logistic(y, omega, V)
        value = (z - np.asarray(omega, dtype=float)) / V
        sp = sigmoid_prime(-np.asarray(y, dtype=float) * z)
        d_omega = -sp / (1.0 + np.asarray(V, dtype=float) * sp)
        return ChannelEval(value=value, d_omega=d_omega, log_partition=None)
    if estimator == "eb":
        g, dg, logZ = _posterior_channel(y, omega, V, rule)
        return ChannelEval(value=g, d_omega=dg, log_partition=logZ)
    # bo: the channel integrates the teacher likelihood, so the label noise
    # and the lost-teacher variance add to the smoothing.
    if noise is None:
        raise ValueError("the bo channel requires an EffectiveNoise")
    V_total = np.asarray(V, dtype=float) + noise.total_sq
    g, dg, logZ = _posterior_channel(y, omega, V_total, rule)
    return ChannelEval(value=g, d_omega=dg, log_partition=logZ)


def partition_Z0(y, omega, v: float, noise) -> np.ndarray | float:
    """Teacher partition function ``Z_0(y, ω, v) = σ_{v + noise}(yω)``."""
    v = _require_variance(v)
    return smoothed_sigmoid(np.asarray(y, dtype=float) * np.asarray(omega, dtype=float),
                            v + noise.total_sq)
