"""Model state, hyperparameters, adaptive projection and the marginal likelihood.

The outcome model is

    y ~ N(B_gamma beta + Z alpha, sigma2 * (I + nu2 * P Kt P))

where ``P`` projects onto the orthogonal complement of the currently included
spline columns (all columns in the non-adaptive variant, none in kernel-only
mode) and ``Kt`` is the (predictive-process) kernel matrix.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import LinAlgError, cholesky, qr, solve_triangular
from scipy.linalg.blas import dtrsm

from .kernel import (
    CovarianceFactor,
    KernelParams,
    index_values,
    jitter_cholesky,
    kernel_blocks,
    kernel_from_indices,
    KernelBlocks,
)
from .priors import (
    LOG_2PI,
    equal_weights,
    log_beta_pdf,
    log_gamma_pdf,
    log_invgamma_pdf,
    log_mvn_diag_precision,
    log_vmf_unnormalized,
)
from .splines import evaluate_basis

MODES = ("ckmr", "nonadaptive", "kernel-only")
RANK_TOL = 1e-8
# numerical rank kept in the orthonormal factor (Householder Q stays orthonormal)
PROJ_RANK_TOL = 1e-12
# fall back to pivoted QR when diag(R) spans more than ~6 orders of magnitude
CHOLQR_COND = 1e-6


class ConfigError(ValueError):
    pass


class StateInvariantError(AssertionError):
    pass


@dataclass
class HyperParameters:
    """Prior hyperparameters and model-level switches.

    Gamma distributions use shape/rate, inverse-gamma shape/scale.
    """

    a_pi: float = 1.0
    b_pi: float = 1.0
    a_rho: float = 1.0
    b_rho: float = 1.0
    a_pi_rho: float = 1.0
    b_pi_rho: float = 1.0
    a_tau: float = 1.0
    b_tau: float = 0.005
    a_star: float = 1.0
    b_star: float = 1.0
    a_sigma: float = 0.001
    b_sigma: float = 0.001
    kappa: float = 0.0
    kappa_prop: float = 1000.0
    jump_s: float = 0.1
    jump_s_nu2: float | None = None
    a_phi: float = 10.0
    df: int = 9
    n_knots: int | None = None
    mode: str = "ckmr"
    polar: bool = True
    # test hooks: hold pi / pi_rho fixed instead of drawing them
    fix_pi: float | None = None
    fix_pi_rho: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("a_pi", "b_pi", "a_rho", "b_rho", "a_pi_rho", "b_pi_rho", "a_tau", "b_tau",
                    "a_star", "b_star", "a_sigma", "b_sigma", "kappa_prop", "jump_s", "a_phi")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if self.jump_s_nu2 is not None and not self.jump_s_nu2 > 0:
            raise ConfigError("jump_s_nu2 must be positive")
        if not self.kappa >= 0:
            raise ConfigError("kappa must be non-negative")
        if self.a_phi <= 2:
            raise ConfigError("a_phi must exceed 2 for the moded Beta proposal")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_knots is not None and int(self.n_knots) < 1:
            raise ConfigError("n_knots must be positive")
        for name in ("fix_pi", "fix_pi_rho"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")

    @property
    def nu2_jump(self):
        return self.jump_s if self.jump_s_nu2 is None else self.jump_s_nu2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    def replace(self, **overrides):
        d = self.to_dict()
        unknown = set(overrides) - set(d)
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {sorted(unknown)}")
        d.update(overrides)
        return HyperParameters(**d)


@dataclass
class ModelState:
    gamma: np.ndarray
    gamma_rho: np.ndarray
    beta: list
    rho: np.ndarray
    theta: list
    tau2: np.ndarray
    nu2: float
    sigma2: float
    alpha: np.ndarray
    pi: float
    pi_rho: float
    extra: dict = field(default_factory=dict)

    def copy(self):
        return ModelState(
            gamma=self.gamma.copy(),
            gamma_rho=self.gamma_rho.copy(),
            beta=[b.copy() for b in self.beta],
            rho=self.rho.copy(),
            theta=[t.copy() for t in self.theta],
            tau2=self.tau2.copy(),
            nu2=float(self.nu2),
            sigma2=float(self.sigma2),
            alpha=self.alpha.copy(),
            pi=float(self.pi),
            pi_rho=float(self.pi_rho),
            extra=copy.deepcopy(self.extra),
        )

    @property
    def M(self):
        return self.gamma.shape[0]

    @property
    def kernel(self):
        return KernelParams(self.rho, self.theta)

    @property
    def beta_concat(self):
        return np.concatenate(self.beta) if self.beta else np.zeros(0)

    def block_state(self, m):
        return int(self.gamma[m]), int(self.gamma_rho[m])

    def check_invariants(self, tol=1e-10):
        for m in range(self.M):
            g, gr = self.block_state(m)
            if g not in (0, 1) or gr not in (0, 1):
                raise StateInvariantError(f"index {m}: indicators must be binary")
            if gr and not g:
                raise StateInvariantError(f"index {m}: state (0,1) is not allowed")
            if not g and np.any(self.beta[m] != 0):
                raise StateInvariantError(f"index {m}: excluded block has non-zero beta")
            if not gr and self.rho[m] != 0:
                raise StateInvariantError(f"index {m}: rho must be 0 when the kernel indicator is off")
            if gr and not self.rho[m] > 0:
                raise StateInvariantError(f"index {m}: rho must be positive when included")
            t = self.theta[m]
            if abs(np.linalg.norm(t) - 1.0) > tol:
                raise StateInvariantError(f"index {m}: theta must have unit norm")
            if not g and not gr and np.max(np.abs(t - equal_weights(t.size))) > tol:
                raise StateInvariantError(f"index {m}: excluded theta must sit at its point mass")
        for name in ("tau2",):
            if np.any(getattr(self, name) <= 0):
                raise StateInvariantError(f"{name} must be positive")
        if not (self.nu2 > 0 and self.sigma2 > 0):
            raise StateInvariantError("nu2 and sigma2 must be positive")
        if not (0 < self.pi < 1 and 0 < self.pi_rho < 1):
            raise StateInvariantError("inclusion probabilities must lie in (0, 1)")
        if not np.all(np.isfinite(self.alpha)):
            raise StateInvariantError("alpha must be finite")


def initial_state(sizes, dims, q, hyper: HyperParameters | None = None):
    """Empty model: everything excluded, unit variances, equal weights."""
    M = len(sizes)
    return ModelState(
        gamma=np.zeros(M, dtype=int),
        gamma_rho=np.zeros(M, dtype=int),
        beta=[np.zeros(d) for d in dims],
        rho=np.zeros(M),
        theta=[equal_weights(L) for L in sizes],
        tau2=np.ones(M),
        nu2=1.0,
        sigma2=1.0,
        alpha=np.zeros(q),
        pi=0.5 if hyper is None or hyper.fix_pi is None else hyper.fix_pi,
        pi_rho=0.5 if hyper is None or hyper.fix_pi_rho is None else hyper.fix_pi_rho,
    )


def spline_dims(spline_system, M, mode):
    if mode == "kernel-only" or spline_system is None:
        return [0] * M
    return list(spline_system.dims)


# --- projection ----------------------------------------------------------------


class Projection:
    """``P = I - B (B.T B)^- B.T`` held as a thin orthonormal basis ``Q`` of span(B).

    Well-conditioned ``B`` is orthonormalized by two passes of Cholesky QR;
    otherwise (or when the Gram matrix is numerically singular) a pivoted
    Householder QR is used. ``Q`` keeps every direction above ``1e-12`` times
    the leading diagonal so that ``P B`` vanishes to rounding error. The
    generalized inverse behind :meth:`coefficients` (used to extend ``P`` to
    new rows) truncates more aggressively at ``1e-8``: near-null directions
    would otherwise get huge coefficients that blow up off the data.
    """

    def __init__(self, B, n, pivoted=False):
        self.n = n
        if B is None or B.shape[1] == 0:
            self.Q = np.zeros((n, 0))
            self.R = np.zeros((0, 0))
            self.piv = np.zeros(0, dtype=int)
            self.rank = self.coef_rank = 0
            self.ncol = 0
            return
        self.ncol = B.shape[1]
        if not pivoted and self._cholqr2(B):
            return
        Qf, R, piv = qr(B, mode="economic", pivoting=True, check_finite=False)
        diag = np.abs(np.diag(R))
        lead = diag[0] if diag.size else 0.0
        rank = int((diag > PROJ_RANK_TOL * lead).sum()) if lead > 0 else 0
        self.Q = np.ascontiguousarray(Qf[:, :rank])
        self.coef_rank = int((diag > RANK_TOL * lead).sum()) if lead > 0 else 0
        self.R = R[: self.coef_rank, : self.coef_rank]
        self.piv = piv
        self.rank = rank

    def _cholqr2(self, B):
        if B.shape[1] > B.shape[0]:
            return False
        try:
            R1 = cholesky(B.T @ B, lower=False, check_finite=False)
        except LinAlgError:
            return False
        d = np.abs(np.diag(R1))
        if d.min() <= CHOLQR_COND * d.max():
            return False
        Q1 = dtrsm(1.0, R1, B, side=1, lower=0)
        try:
            R2 = cholesky(Q1.T @ Q1, lower=False, check_finite=False)
        except LinAlgError:
            return False
        self.Q = dtrsm(1.0, R2, Q1, side=1, lower=0)
        self.R = R2 @ R1
        self.piv = np.arange(B.shape[1])
        self.rank = self.coef_rank = B.shape[1]
        return True

    def apply(self, v):
        if self.rank == 0:
            return np.array(v, dtype=float, copy=True)
        return v - self.Q @ (self.Q.T @ v)

    __call__ = apply

    def dense(self):
        return np.eye(self.n) - self.Q @ self.Q.T

    def coefficients(self, v):
        """Coefficients ``c`` (length ncol) with ``B c = Q_r Q_r.T v``.

        ``Q_r`` is the leading ``coef_rank`` columns of ``Q``; it equals ``Q``
        unless ``B`` has directions below the ``1e-8`` generalized-inverse cut.
        """
        c = np.zeros((self.ncol,) + np.shape(v)[1:])
        r = self.coef_rank
        if r:
            c[self.piv[:r]] = solve_triangular(self.R, self.Q[:, :r].T @ v, check_finite=False)
        return c


def projection_columns(gamma, mode, M):
    """Indices whose spline blocks enter the projection."""
    if mode == "kernel-only":
        return []
    if mode == "nonadaptive":
        return list(range(M))
    return [m for m in range(M) if gamma[m]]


def basis_blocks(spline_system, E, mode):
    """Spline design blocks for every index at index values ``E`` (N x M)."""
    if mode == "kernel-only" or spline_system is None:
        return [np.zeros((E.shape[0], 0)) for _ in range(E.shape[1])]
    return [evaluate_basis(spline_system, m, E[:, m]) for m in range(E.shape[1])]


def adaptive_projection(spline_system, dataset, theta, gamma, mode="ckmr"):
    """Projection onto the orthogonal complement of the included spline columns."""
    n = dataset.n
    cols = projection_columns(gamma, mode, dataset.M)
    if not cols:
        return Projection(None, n)
    E = index_values(dataset.groups, theta)
    B = np.hstack([evaluate_basis(spline_system, m, E[:, m]) for m in cols])
    return Projection(B, n)


# --- dense covariance (exact kernel) -----------------------------------------------


class DenseCovariance:
    """Exact ``I + nu2 * P K P`` factorization for small problems (no knots)."""

    def __init__(self, K, Q, nu2, n):
        self.nu2 = float(nu2)
        self.n = n
        if Q is not None and Q.shape[1]:
            KP = K - (K @ Q) @ Q.T
            PKP = KP - Q @ (Q.T @ KP)
        else:
            PKP = K
        S = np.eye(n) + self.nu2 * PKP
        S = 0.5 * (S + S.T)
        L, _ = jitter_cholesky(S, start=0.0)
        self._chol = L
        self.logdet = 2.0 * float(np.log(np.diag(L)).sum())

    def quad(self, r):
        w = solve_triangular(self._chol, r, lower=True, check_finite=False)
        return float(w @ w)

    def solve(self, V):
        from scipy.linalg import cho_solve

        return cho_solve((self._chol, True), np.asarray(V, dtype=float), check_finite=False)


def covariance_factor(knots, E_knots, E, rho, Q, nu2, n, blocks=None):
    """Covariance factorization for the current kernel state.

    ``knots=None`` selects the exact dense kernel; otherwise the predictive
    process with the knot kernel blocks (computed unless ``blocks`` is given).
    """
    if knots is None:
        K = kernel_from_indices(E, E, rho, same=True)
        return DenseCovariance(K, Q, nu2, n), None
    if blocks is None:
        blocks = kernel_blocks(E_knots, E, rho, knots.jitter)
    return CovarianceFactor(blocks, Q, nu2, n), blocks


def loglik_from_parts(n, sigma2, logdet, quad):
    return -0.5 * n * (LOG_2PI + math.log(sigma2)) - 0.5 * logdet - 0.5 * quad / sigma2


def mean_fit(blocks, state, mode):
    n = blocks[0].shape[0]
    fit = np.zeros(n)
    if mode == "kernel-only":
        return fit
    for m, B in enumerate(blocks):
        if state.gamma[m] and B.shape[1]:
            fit += B @ state.beta[m]
    return fit


def marginal_loglik(state: ModelState, dataset, spline_system, knots, mode="ckmr"):
    """Gaussian log-likelihood with the kernel part integrated out, built from scratch."""
    n = dataset.n
    E = index_values(dataset.groups, state.theta)
    blocks = basis_blocks(spline_system, E, mode)
    cols = projection_columns(state.gamma, mode, dataset.M)
    proj = Projection(np.hstack([blocks[m] for m in cols]) if cols else None, n)
    E_knots = None if knots is None else knots.index_values(state.theta)
    cov, _ = covariance_factor(knots, E_knots, E, state.rho, proj.Q, state.nu2, n)
    r = dataset.y - mean_fit(blocks, state, mode) - dataset.Z @ state.alpha
    return loglik_from_parts(n, state.sigma2, cov.logdet, cov.quad(r))


# --- priors --------------------------------------------------------------------------


def log_block_prior(state: ModelState, m, hyper: HyperParameters, penalty, mode):
    """Prior terms that depend on the inclusion status of index ``m``.

    Covers the indicator probabilities, the beta slab, the rho slab and the
    theta prior; point masses contribute nothing.
    """
    g, gr = state.block_state(m)
    lp = math.log(state.pi) if g else math.log1p(-state.pi)
    if not g:
        return lp
    if mode == "kernel-only":
        lp += log_gamma_pdf(state.rho[m], hyper.a_rho, hyper.b_rho)
    else:
        lp += math.log(state.pi_rho) if gr else math.log1p(-state.pi_rho)
        lp += log_mvn_diag_precision(state.beta[m], slab_precision(penalty, state.tau2[m]))
        if gr:
            lp += log_gamma_pdf(state.rho[m], hyper.a_rho, hyper.b_rho)
    t = state.theta[m]
    if t.size > 1 and hyper.kappa > 0:
        lp += log_vmf_unnormalized(t, hyper.kappa, equal_weights(t.size))
    return lp


def slab_precision(penalty, tau2):
    """Diagonal prior precision of a beta block: ``s_k / tau2`` plus 1 for the linear term."""
    prec = np.asarray(penalty, dtype=float) / tau2
    prec = prec.copy()
    prec[-1] = 1.0
    return prec


def log_prior(state: ModelState, hyper: HyperParameters, spline_system=None):
    mode = hyper.mode
    lp = 0.0
    for m in range(state.M):
        penalty = None if spline_system is None or mode == "kernel-only" else spline_system.penalty(m)
        lp += log_block_prior(state, m, hyper, penalty, mode)
        lp += log_invgamma_pdf(state.tau2[m], hyper.a_tau, hyper.b_tau)
    if hyper.fix_pi is None:
        lp += log_beta_pdf(state.pi, hyper.a_pi, hyper.b_pi)
    if hyper.fix_pi_rho is None and mode != "kernel-only":
        lp += log_beta_pdf(state.pi_rho, hyper.a_pi_rho, hyper.b_pi_rho)
    lp += log_invgamma_pdf(state.nu2, hyper.a_star, hyper.b_star)
    lp += log_invgamma_pdf(state.sigma2, hyper.a_sigma, hyper.b_sigma)
    a = state.alpha
    lp += -0.5 * float(a @ a) - 0.5 * a.size * LOG_2PI
    return float(lp)


def log_posterior_unnorm(state, dataset, spline_system, knots, hyper: HyperParameters, likelihood=True):
    """Unnormalized log posterior; ``likelihood=False`` returns the log prior only."""
    lp = log_prior(state, hyper, spline_system)
    if likelihood:
        lp += marginal_loglik(state, dataset, spline_system, knots, hyper.mode)
    return lp


__all__ = [
    "MODES",
    "ConfigError",
    "StateInvariantError",
    "HyperParameters",
    "ModelState",
    "KernelBlocks",
    "Projection",
    "DenseCovariance",
    "initial_state",
    "spline_dims",
    "adaptive_projection",
    "basis_blocks",
    "projection_columns",
    "covariance_factor",
    "loglik_from_parts",
    "mean_fit",
    "marginal_loglik",
    "log_block_prior",
    "slab_precision",
    "log_prior",
    "log_posterior_unnorm",
]
