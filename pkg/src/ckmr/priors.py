"""Prior densities, von Mises-Fisher sampling and half-sphere polar coordinates."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import betaln, gammaln

LOG_2PI = math.log(2.0 * math.pi)
HALF_PI = 0.5 * math.pi
BOUNDARY_NUDGE = 1e-9


class PolarDomainError(ValueError):
    pass


# --- log densities -----------------------------------------------------------


def log_gamma_pdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return np.where(x > 0, out, -np.inf) if out.ndim else (float(out) if x > 0 else -np.inf)


def log_invgamma_pdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return np.where(x > 0, out, -np.inf) if out.ndim else (float(out) if x > 0 else -np.inf)


def log_beta_pdf(x, a, b):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)
    inside = (x > 0) & (x < 1)
    return np.where(inside, out, -np.inf) if out.ndim else (float(out) if inside else -np.inf)


def log_normal_pdf(x, mean=0.0, var=1.0):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def log_mvn_diag_precision(x, precision):
    """Zero-mean multivariate normal with diagonal precision."""
    x = np.asarray(x, dtype=float)
    precision = np.asarray(precision, dtype=float)
    return float(0.5 * np.log(precision).sum() - 0.5 * x.size * LOG_2PI - 0.5 * (precision * x * x).sum())


def log_vmf_unnormalized(x, kappa, mu):
    """``kappa * mu.x``; the normalizing constant is omitted (kappa is fixed)."""
    return float(kappa * np.dot(mu, x))


# --- von Mises-Fisher ----------------------------------------------------------


def _tangent_unit(mu, rng):
    while True:
        v = rng.standard_normal(mu.shape[0])
        v -= mu * (mu @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            return v / nv


def sample_vmf(kappa, mu, rng):
    """One draw from vMF(kappa, mu) on the unit sphere (Wood's rejection scheme).

    ``kappa = 0`` gives the uniform distribution on the sphere.
    """
    mu = np.asarray(mu, dtype=float)
    p = mu.shape[0]
    if p == 1:
        # S^0 = {-1, +1}
        p_plus = 1.0 / (1.0 + math.exp(-2.0 * kappa * mu[0]))
        return np.array([1.0 if rng.random() < p_plus else -1.0])
    dim = p - 1
    b = dim / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + dim * dim))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * math.log(1.0 - x0 * x0)
    while True:
        z = rng.beta(0.5 * dim, 0.5 * dim)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random()
        if kappa * w + dim * math.log(1.0 - x0 * w) - c >= math.log(u):
            break
    v = _tangent_unit(mu, rng)
    x = w * mu + math.sqrt(max(0.0, 1.0 - w * w)) * v
    return x / np.linalg.norm(x)


def sample_uniform_halfsphere(L, rng):
    """Uniform draw on ``{theta : |theta| = 1, theta[0] >= 0}``."""
    x = rng.standard_normal(L)
    x /= np.linalg.norm(x)
    x[0] = abs(x[0])
    return x


def equal_weights(L):
    return np.full(L, L ** -0.5)


# --- polar coordinates on the half sphere --------------------------------------


def polar_boxes(L):
    """Angle ranges for an ``L``-dimensional weight vector (``L - 1`` angles).

    The first angle lives in ``[0, pi/2]``, middle angles in
    ``[-pi/2, pi/2]`` and the last angle in ``[-pi, pi]`` so that the image is
    the whole half sphere ``theta[0] >= 0``. For ``L = 2`` the single angle
    ranges over ``[0, pi]``.
    """
    if L < 2:
        return []
    if L == 2:
        return [(0.0, math.pi)]
    return [(0.0, HALF_PI)] + [(-HALF_PI, HALF_PI)] * (L - 3) + [(-math.pi, math.pi)]


def polar_to_theta(phi):
    """Map ``L - 1`` angles to a unit vector with non-negative first entry.

    ``theta[k] = sin(phi[k]) * prod_{l<k} cos(phi[l])`` for ``k < L - 1`` and
    ``theta[L-1] = prod_l cos(phi[l])``.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    L = phi.shape[0] + 1
    for a, (lo, hi) in zip(phi, polar_boxes(L)):
        if a < lo - 1e-12 or a > hi + 1e-12:
            raise PolarDomainError(f"angle {a!r} outside [{lo}, {hi}]")
    if L == 1:
        return np.ones(1)
    theta = np.empty(L)
    running = 1.0
    for k in range(L - 1):
        theta[k] = math.sin(phi[k]) * running
        running *= math.cos(phi[k])
    theta[L - 1] = running
    return theta


def theta_to_polar(theta):
    """Inverse of :func:`polar_to_theta`; degenerate trailing angles are set to 0."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    L = theta.shape[0]
    if theta[0] < -1e-12:
        raise PolarDomainError(f"first weight must be non-negative, got {theta[0]!r}")
    if L == 1:
        return np.zeros(0)
    theta = theta.copy()
    theta[0] = max(theta[0], 0.0)
    # tail[k] = ||theta[k:]||
    tail = np.sqrt(np.cumsum((theta * theta)[::-1])[::-1])
    phi = np.empty(L - 1)
    for k in range(L - 2):
        phi[k] = math.atan2(theta[k], tail[k + 1])
    phi[L - 2] = math.atan2(theta[L - 2], theta[L - 1])
    return phi


def polar_log_jacobian(phi):
    """Log surface-measure factor ``sum_l (L - 2 - l) * log|cos(phi[l])|`` (0-based)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    L = phi.shape[0] + 1
    if L <= 2:
        return 0.0
    exps = np.arange(L - 2, 0, -1, dtype=float)
    with np.errstate(divide="ignore"):
        return float((exps * np.log(np.abs(np.cos(phi[: L - 2])))).sum())


def polar_jacobian(phi):
    """Surface-measure factor of the polar map (positive on the open boxes)."""
    return math.exp(polar_log_jacobian(phi))


def _beta_b_for_mode(u, a):
    return ((1.0 - u) * a + 2.0 * u - 1.0) / u


def moded_beta_proposal(current, a_phi, box, rng):
    """Scaled Beta proposal on ``box`` whose mode sits at ``current``.

    Returns ``(proposal, log_q_forward, log_q_reverse)`` where both densities
    are on the angle scale.
    """
    lo, hi = box
    width = hi - lo
    u = (current - lo) / width
    u = min(max(u, BOUNDARY_NUDGE), 1.0 - BOUNDARY_NUDGE)
    b = _beta_b_for_mode(u, a_phi)
    v = rng.beta(a_phi, b)
    v = min(max(v, BOUNDARY_NUDGE), 1.0 - BOUNDARY_NUDGE)
    b_rev = _beta_b_for_mode(v, a_phi)
    log_width = math.log(width)
    log_q_fwd = log_beta_pdf(v, a_phi, b) - log_width
    log_q_rev = log_beta_pdf(u, a_phi, b_rev) - log_width
    return lo + v * width, log_q_fwd, log_q_rev
