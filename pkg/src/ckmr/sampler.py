"""Reversible-jump MCMC for the collapsible kernel / multiple index model.

One sweep visits, in order: a between-model move for every index, weight
refinements for included multi-component indices, the joint Gibbs draw of the
spline coefficients, the smoothing variances, ``pi``, the kernel weights,
``pi_rho``, ``nu2``, the confounder coefficients and finally ``sigma2``.

Each chain keeps a cache of the expensive quantities (index values, basis
blocks, projection factor, kernel blocks, covariance factorization, fitted
mean). Proposals build a new cache that shares unchanged pieces with the
current one, so rejecting a move simply drops the proposed cache.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .draws import DrawLayout, PosteriorDraws
from .kernel import NumericalError, index_values, kernel_blocks, kernel_from_indices
from .model import (
    CovarianceFactor,
    DenseCovariance,
    HyperParameters,
    ModelState,
    Projection,
    basis_blocks,
    initial_state,
    log_block_prior,
    log_prior,
    loglik_from_parts,
    projection_columns,
    slab_precision,
    spline_dims,
)
from .priors import (
    equal_weights,
    log_gamma_pdf,
    log_invgamma_pdf,
    log_mvn_diag_precision,
    log_vmf_unnormalized,
    moded_beta_proposal,
    polar_boxes,
    polar_log_jacobian,
    polar_to_theta,
    sample_vmf,
    theta_to_polar,
)
from .splines import evaluate_basis

log = logging.getLogger(__name__)

RHO_FLOOR = 1e-12
STATES = ((0, 0), (1, 0), (1, 1))
CANCEL_TOL = 1e-10
LOG_FLOAT_MAX = math.log(np.finfo(float).max)


class ChainAbort(RuntimeError):
    """Unrecoverable numerical failure; ``last_good`` is the last completed sweep."""

    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class ChainConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    chain_count: int = 2
    threads: int = 1
    likelihood: bool = True
    debug: bool = False
    dense: bool = False  # exact kernel instead of the predictive process
    progress_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.chain_count < 1:
            raise ValueError("chain_count must be >= 1")


MOVE_TYPES = ("between", "theta", "beta", "rho", "nu2")


@dataclass
class MoveDiagnostics:
    M: int
    proposals: dict = field(default_factory=lambda: {k: 0 for k in MOVE_TYPES})
    accepts: dict = field(default_factory=lambda: {k: 0 for k in MOVE_TYPES})
    forced_rejections: dict = field(default_factory=lambda: {k: 0 for k in MOVE_TYPES})
    dwell: np.ndarray = None
    sweeps: int = 0
    runtime: float = 0.0

    def __post_init__(self):
        if self.dwell is None:
            self.dwell = np.zeros((self.M, 3), dtype=int)

    def record(self, move, accepted, forced=False):
        self.proposals[move] += 1
        if accepted:
            self.accepts[move] += 1
        if forced:
            self.forced_rejections[move] += 1

    def acceptance_rates(self):
        return {k: (self.accepts[k] / self.proposals[k] if self.proposals[k] else None) for k in MOVE_TYPES}

    def to_dict(self):
        return {
            "proposals": dict(self.proposals),
            "accepts": dict(self.accepts),
            "forced_rejections": dict(self.forced_rejections),
            "acceptance_rates": self.acceptance_rates(),
            "dwell": self.dwell.tolist(),
            "sweeps": self.sweeps,
            "runtime_seconds": self.runtime,
        }


@dataclass
class _Cache:
    E: np.ndarray
    Ek: np.ndarray | None
    blocks: list
    proj: Projection
    kstate: object  # KernelBlocks, dense K, or None
    cov: object
    fit: np.ndarray
    zalpha: np.ndarray
    quad: float
    loglik: float


def _ig_draw(rng, shape, scale):
    g = rng.gamma(shape)
    if g > 0.0:
        return scale / g
    # tiny shapes underflow; log G = log G(shape + 1) + log(U) / shape
    log_g = math.log(rng.gamma(shape + 1.0)) + math.log(rng.random()) / shape
    return math.exp(min(math.log(scale) - log_g, LOG_FLOAT_MAX))


def gamma_rw_proposal(rng, current, s):
    """Gamma random-walk draw with mean ``current`` and sd ``s`` (current floored at 1e-12)."""
    c = max(current, RHO_FLOOR)
    return rng.gamma(c * c / (s * s), s * s / c)


def propose_block_state(current, rng, kernel_only=False):
    """Index into ``STATES`` of the proposed inclusion state for a between-model move.

    With kernel-only mode the states are (0,0) and (1,1) and the move is a swap.
    """
    if kernel_only:
        return 2 if current == 0 else 0
    others = [k for k in range(3) if k != current]
    return others[int(rng.integers(2))]


def pi_conditional(gamma, hyper: HyperParameters):
    """Beta parameters of the ``pi`` full conditional."""
    k = int(np.sum(gamma))
    return hyper.a_pi + k, hyper.b_pi + len(gamma) - k


def pi_rho_conditional(gamma, gamma_rho, hyper: HyperParameters):
    """Beta parameters of the ``pi_rho`` full conditional; only included indices count."""
    gamma = np.asarray(gamma)
    gamma_rho = np.asarray(gamma_rho)
    a = int((gamma * gamma_rho).sum())
    b = int((gamma * (1 - gamma_rho)).sum())
    return hyper.a_pi_rho + a, hyper.b_pi_rho + b


def gamma_rw_logq(to, frm, s):
    """Log density of the Gamma random-walk proposal ``frm -> to`` (mean frm, sd s)."""
    c = max(frm, RHO_FLOOR)
    return log_gamma_pdf(to, c * c / (s * s), c / (s * s))


class Chain:
    """A single MCMC chain with its state, cache, RNG stream and diagnostics."""

    def __init__(self, dataset, spline_system, knots, hyper: HyperParameters, rng,
                 likelihood=True, debug=False, dense=False, state=None):
        self.data = dataset
        self.splines = spline_system
        self.knots = None if dense else knots
        self.hyper = hyper
        self.mode = hyper.mode
        self.rng = rng
        self.likelihood = likelihood
        self.debug = debug
        self.n = dataset.n
        self.M = dataset.M
        self.sizes = dataset.sizes
        self.dims = spline_dims(spline_system, self.M, self.mode)
        self.layout = DrawLayout(tuple(self.sizes), tuple(self.dims), dataset.q)
        self.penalties = [
            None if self.dims[m] == 0 else np.asarray(spline_system.penalty(m)) for m in range(self.M)
        ]
        if self.knots is not None:
            self._knot_groups = [self.knots.rows[:, s] for s in self.knots.group_slices]
        self.diag = MoveDiagnostics(self.M)
        if state is None:
            state = initial_state(self.sizes, self.dims, dataset.q, hyper)
            if likelihood:
                coef, *_ = np.linalg.lstsq(dataset.Z, dataset.y, rcond=None)
                state.alpha = coef
                resid = dataset.y - dataset.Z @ coef
                state.sigma2 = max(float(resid @ resid) / max(self.n - dataset.q, 1), 1e-8)
        self.state = state
        self.cache = self._full_cache(state) if likelihood else None

    # --- cache construction ------------------------------------------------------

    def _kernel_state(self, E, Ek, rho):
        if self.knots is None:
            if not np.any(rho > 0):
                return None
            return kernel_from_indices(E, E, rho, same=True)
        return kernel_blocks(Ek, E, rho, self.knots.jitter)

    def _cov(self, kstate, proj, nu2):
        if self.knots is None:
            K = np.ones((self.n, self.n)) if kstate is None else kstate
            return DenseCovariance(K, proj.Q, nu2, self.n)
        return CovarianceFactor(kstate, proj.Q, nu2, self.n)

    def _projection(self, state, blocks):
        cols = projection_columns(state.gamma, self.mode, self.M)
        cols = [m for m in cols if blocks[m].shape[1]]
        if not cols:
            return Projection(None, self.n)
        return Projection(np.hstack([blocks[m] for m in cols]), self.n)

    def _fit(self, state, blocks):
        fit = np.zeros(self.n)
        for m in range(self.M):
            if state.gamma[m] and self.dims[m]:
                fit += blocks[m] @ state.beta[m]
        return fit

    def _finish(self, c: _Cache, state):
        r = self.data.y - c.fit - c.zalpha
        c.quad = c.cov.quad(r)
        c.loglik = loglik_from_parts(self.n, state.sigma2, c.cov.logdet, c.quad)
        return c

    def _full_cache(self, state):
        E = index_values(self.data.groups, state.theta)
        Ek = None if self.knots is None else index_values(self._knot_groups, state.theta)
        blocks = basis_blocks(self.splines, E, self.mode)
        proj = self._projection(state, blocks)
        kstate = self._kernel_state(E, Ek, state.rho)
        cov = self._cov(kstate, proj, state.nu2)
        c = _Cache(E, Ek, blocks, proj, kstate, cov, self._fit(state, blocks),
                   self.data.Z @ state.alpha, 0.0, 0.0)
        return self._finish(c, state)

    def _propose_cache(self, state, theta_changed=(), proj=False, kernel=False, cov=False,
                       fit=False, alpha=False):
        """Cache for ``state`` derived from the current cache; raises NumericalError."""
        base = self.cache
        c = replace(base)
        if theta_changed:
            c.E = base.E.copy()
            c.Ek = None if base.Ek is None else base.Ek.copy()
            c.blocks = list(base.blocks)
            pcols = set(projection_columns(state.gamma, self.mode, self.M))
            for m in theta_changed:
                t = state.theta[m]
                c.E[:, m] = self.data.groups[m] @ t
                if c.Ek is not None:
                    c.Ek[:, m] = self._knot_groups[m] @ t
                if self.dims[m]:
                    c.blocks[m] = evaluate_basis(self.splines, m, c.E[:, m])
                    proj = proj or m in pcols
                    fit = fit or bool(state.gamma[m])
                kernel = kernel or state.rho[m] > 0
        if proj:
            c.proj = self._projection(state, c.blocks)
        if kernel:
            c.kstate = self._kernel_state(c.E, c.Ek, state.rho)
        if proj or kernel or cov:
            c.cov = self._cov(c.kstate, c.proj, state.nu2)
        if fit:
            c.fit = self._fit(state, c.blocks)
        if alpha:
            c.zalpha = self.data.Z @ state.alpha
        return self._finish(c, state)

    def loglik(self):
        return 0.0 if self.cache is None else self.cache.loglik

    def _try_cache(self, move, state, **kw):
        if not self.likelihood:
            return None, 0.0
        try:
            c = self._propose_cache(state, **kw)
        except (NumericalError, LinAlgError, FloatingPointError) as exc:
            log.debug("forced rejection in %s move: %s", move, exc)
            return False, None
        return c, c.loglik

    def _accept(self, log_alpha):
        return log_alpha >= 0 or math.log(self.rng.random()) < log_alpha

    # --- prior draws for new blocks -----------------------------------------------

    def _draw_theta_prior(self, L):
        if L == 1:
            return np.ones(1)
        mu = equal_weights(L)
        kappa = self.hyper.kappa
        if not self.hyper.polar:
            return sample_vmf(kappa, mu, self.rng)
        if kappa == 0:
            t = sample_vmf(0.0, mu, self.rng)
            t[0] = abs(t[0])
            return t
        while True:
            t = sample_vmf(kappa, mu, self.rng)
            if t[0] >= 0:
                return t

    def _log_theta_prior(self, t):
        if t.size == 1 or self.hyper.kappa == 0:
            return 0.0
        return log_vmf_unnormalized(t, self.hyper.kappa, equal_weights(t.size))

    def _draw_beta_slab(self, m, tau2):
        prec = slab_precision(self.penalties[m], tau2)
        return self.rng.standard_normal(prec.size) / np.sqrt(prec)

    # --- moves -------------------------------------------------------------------

    def between_model(self, m):
        """Propose one of the two other inclusion states for index ``m``."""
        st = self.state
        hyper = self.hyper
        kernel_only = self.mode == "kernel-only"
        cur = STATES.index(st.block_state(m))
        target = propose_block_state(cur, self.rng, kernel_only)
        g_new, gr_new = STATES[target]
        new = st.copy()
        log_q_fwd = 0.0
        log_q_rev = 0.0
        L = self.sizes[m]
        theta_changed = ()

        if cur == 0:
            # entering: draw beta, theta (and rho) from their priors
            new.gamma[m] = 1
            new.gamma_rho[m] = gr_new
            if self.dims[m]:
                new.beta[m] = self._draw_beta_slab(m, st.tau2[m])
                log_q_fwd += log_mvn_diag_precision(new.beta[m], slab_precision(self.penalties[m], st.tau2[m]))
            if L > 1:
                new.theta[m] = self._draw_theta_prior(L)
                log_q_fwd += self._log_theta_prior(new.theta[m])
                theta_changed = (m,)
            if gr_new:
                new.rho[m] = self.rng.gamma(hyper.a_rho, 1.0 / hyper.b_rho)
                log_q_fwd += log_gamma_pdf(new.rho[m], hyper.a_rho, hyper.b_rho)
        elif target == 0:
            new.gamma[m] = 0
            new.gamma_rho[m] = 0
            if self.dims[m]:
                log_q_rev += log_mvn_diag_precision(st.beta[m], slab_precision(self.penalties[m], st.tau2[m]))
                new.beta[m] = np.zeros(self.dims[m])
            if L > 1:
                log_q_rev += self._log_theta_prior(st.theta[m])
                new.theta[m] = equal_weights(L)
                theta_changed = (m,)
            if st.gamma_rho[m]:
                log_q_rev += log_gamma_pdf(st.rho[m], hyper.a_rho, hyper.b_rho)
                new.rho[m] = 0.0
        else:
            # (1,0) <-> (1,1): toggle the kernel weight only
            if gr_new:
                new.gamma_rho[m] = 1
                new.rho[m] = self.rng.gamma(hyper.a_rho, 1.0 / hyper.b_rho)
                log_q_fwd += log_gamma_pdf(new.rho[m], hyper.a_rho, hyper.b_rho)
            else:
                log_q_rev += log_gamma_pdf(st.rho[m], hyper.a_rho, hyper.b_rho)
                new.gamma_rho[m] = 0
                new.rho[m] = 0.0

        lp_old = log_block_prior(st, m, hyper, self.penalties[m], self.mode)
        lp_new = log_block_prior(new, m, hyper, self.penalties[m], self.mode)
        if self.debug:
            ind_old = self._log_indicator(st, m)
            ind_new = self._log_indicator(new, m)
            gap = (lp_new - lp_old) + log_q_rev - log_q_fwd - (ind_new - ind_old)
            assert abs(gap) < CANCEL_TOL * max(1.0, abs(lp_new) + abs(lp_old)), \
                f"prior/proposal cancellation failed by {gap}"

        gamma_flip = cur == 0 or target == 0
        kernel_change = bool(st.rho[m] > 0) != bool(new.rho[m] > 0)
        c, ll_new = self._try_cache(
            "between", new, theta_changed=theta_changed,
            proj=gamma_flip and self.mode == "ckmr", kernel=kernel_change, fit=gamma_flip,
        )
        if c is False:
            self.diag.record("between", False, forced=True)
            return False
        log_alpha = ll_new - self.loglik() + lp_new - lp_old + log_q_rev - log_q_fwd
        ok = self._accept(log_alpha)
        self.diag.record("between", ok)
        if ok:
            self.state, self.cache = new, c
        return ok

    def _log_indicator(self, st, m):
        g, gr = st.block_state(m)
        lp = math.log(st.pi) if g else math.log1p(-st.pi)
        if g and self.mode != "kernel-only":
            lp += math.log(st.pi_rho) if gr else math.log1p(-st.pi_rho)
        return lp

    def refine_theta(self, m):
        """Metropolis-Hastings refinement of the weights of an included index."""
        st = self.state
        L = self.sizes[m]
        if L < 2 or not st.gamma[m]:
            return None
        hyper = self.hyper
        theta = st.theta[m]
        log_extra = 0.0
        if hyper.polar:
            if not math.isfinite(hyper.a_phi):
                prop = theta.copy()
            else:
                phi = theta_to_polar(theta)
                phi_new = np.empty_like(phi)
                for l, box in enumerate(polar_boxes(L)):
                    phi_new[l], lf, lr = moded_beta_proposal(phi[l], hyper.a_phi, box, self.rng)
                    log_extra += lr - lf
                prop = polar_to_theta(phi_new)
                log_extra += polar_log_jacobian(phi_new) - polar_log_jacobian(phi)
        else:
            prop = theta.copy() if not math.isfinite(hyper.kappa_prop) else sample_vmf(hyper.kappa_prop, theta, self.rng)
        new = st.copy()
        new.theta[m] = prop
        c, ll_new = self._try_cache("theta", new, theta_changed=(m,))
        if c is False:
            self.diag.record("theta", False, forced=True)
            return False
        log_alpha = ll_new - self.loglik() + self._log_theta_prior(prop) - self._log_theta_prior(theta) + log_extra
        ok = self._accept(log_alpha)
        self.diag.record("theta", ok)
        if ok:
            self.state, self.cache = new, c
        return ok

    def gibbs_beta(self):
        """Joint Gaussian draw of all included spline coefficient blocks."""
        st = self.state
        inc = [m for m in range(self.M) if st.gamma[m] and self.dims[m]]
        if not inc:
            return
        if not self.likelihood:
            for m in inc:
                st.beta[m] = self._draw_beta_slab(m, st.tau2[m])
            return
        c = self.cache
        B = np.hstack([c.blocks[m] for m in inc])
        V = np.concatenate([slab_precision(self.penalties[m], st.tau2[m]) for m in inc])
        SB = c.cov.solve(B)
        prec = B.T @ SB / st.sigma2
        prec[np.diag_indices_from(prec)] += V
        rhs = SB.T @ (self.data.y - c.zalpha) / st.sigma2
        try:
            Lc = cholesky(0.5 * (prec + prec.T), lower=True, check_finite=False)
        except LinAlgError:
            self.diag.record("beta", False, forced=True)
            return
        mean = cho_solve((Lc, True), rhs, check_finite=False)
        draw = mean + solve_triangular(Lc.T, self.rng.standard_normal(mean.size), lower=False, check_finite=False)
        new = st.copy()
        k = 0
        for m in inc:
            new.beta[m] = draw[k:k + self.dims[m]]
            k += self.dims[m]
        self.diag.record("beta", True)
        self.state = new
        c2 = replace(c)
        c2.fit = self._fit(new, c.blocks)
        self.cache = self._finish(c2, new)

    def beta_conditional(self):
        """Mean and covariance of the current beta full conditional (for checks)."""
        st = self.state
        inc = [m for m in range(self.M) if st.gamma[m] and self.dims[m]]
        c = self.cache
        B = np.hstack([c.blocks[m] for m in inc])
        V = np.concatenate([slab_precision(self.penalties[m], st.tau2[m]) for m in inc])
        SB = c.cov.solve(B)
        prec = B.T @ SB / st.sigma2 + np.diag(V)
        cov = np.linalg.inv(prec)
        return cov @ (SB.T @ (self.data.y - c.zalpha) / st.sigma2), cov

    def gibbs_tau2(self):
        st = self.state
        h = self.hyper
        for m in range(self.M):
            if st.gamma[m] and self.dims[m]:
                d = self.dims[m]
                b = st.beta[m]
                shape = h.a_tau + 0.5 * (d - 1)
                scale = h.b_tau + 0.5 * float((self.penalties[m][:-1] * b[:-1] ** 2).sum())
            else:
                shape, scale = h.a_tau, h.b_tau
            st.tau2[m] = _ig_draw(self.rng, shape, scale)

    def gibbs_pi(self):
        st = self.state
        h = self.hyper
        if h.fix_pi is not None:
            st.pi = h.fix_pi
            return
        a, b = pi_conditional(st.gamma, h)
        st.pi = float(np.clip(self.rng.beta(a, b), 1e-300, 1 - 1e-16))

    def gibbs_pi_rho(self):
        st = self.state
        h = self.hyper
        if self.mode == "kernel-only":
            return
        if h.fix_pi_rho is not None:
            st.pi_rho = h.fix_pi_rho
            return
        a, b = pi_rho_conditional(st.gamma, st.gamma_rho, h)
        st.pi_rho = float(np.clip(self.rng.beta(a, b), 1e-300, 1 - 1e-16))

    def mh_rho(self, m):
        st = self.state
        if not st.gamma_rho[m]:
            return None
        h = self.hyper
        s = h.jump_s
        cur = float(st.rho[m])
        prop = gamma_rw_proposal(self.rng, cur, s)
        if not prop > 0:
            self.diag.record("rho", False, forced=True)
            return False
        new = st.copy()
        new.rho[m] = prop
        c, ll_new = self._try_cache("rho", new, kernel=True)
        if c is False:
            self.diag.record("rho", False, forced=True)
            return False
        log_alpha = (ll_new - self.loglik()
                     + log_gamma_pdf(prop, h.a_rho, h.b_rho) - log_gamma_pdf(cur, h.a_rho, h.b_rho)
                     + gamma_rw_logq(cur, prop, s) - gamma_rw_logq(prop, cur, s))
        ok = self._accept(log_alpha)
        self.diag.record("rho", ok)
        if ok:
            self.state, self.cache = new, c
        return ok

    def mh_nu2(self):
        st = self.state
        h = self.hyper
        s = h.nu2_jump
        cur = float(st.nu2)
        prop = gamma_rw_proposal(self.rng, cur, s)
        if not prop > 0:
            self.diag.record("nu2", False, forced=True)
            return False
        new = st.copy()
        new.nu2 = prop
        c, ll_new = self._try_cache("nu2", new, cov=True)
        if c is False:
            self.diag.record("nu2", False, forced=True)
            return False
        log_alpha = (ll_new - self.loglik()
                     + log_invgamma_pdf(prop, h.a_star, h.b_star) - log_invgamma_pdf(cur, h.a_star, h.b_star)
                     + gamma_rw_logq(cur, prop, s) - gamma_rw_logq(prop, cur, s))
        ok = self._accept(log_alpha)
        self.diag.record("nu2", ok)
        if ok:
            self.state, self.cache = new, c
        return ok

    def gibbs_alpha(self):
        st = self.state
        q = self.data.q
        if not self.likelihood:
            st.alpha = self.rng.standard_normal(q)
            return
        c = self.cache
        Z = self.data.Z
        SZ = c.cov.solve(Z)
        prec = Z.T @ SZ / st.sigma2 + np.eye(q)
        rhs = SZ.T @ (self.data.y - c.fit) / st.sigma2
        Lc = cholesky(0.5 * (prec + prec.T), lower=True, check_finite=False)
        mean = cho_solve((Lc, True), rhs, check_finite=False)
        st.alpha = mean + solve_triangular(Lc.T, self.rng.standard_normal(q), lower=False, check_finite=False)
        c.zalpha = Z @ st.alpha
        self._finish(c, st)

    def gibbs_sigma2(self):
        st = self.state
        h = self.hyper
        if not self.likelihood:
            st.sigma2 = _ig_draw(self.rng, h.a_sigma, h.b_sigma)
            return
        c = self.cache
        st.sigma2 = _ig_draw(self.rng, h.a_sigma + 0.5 * self.n, h.b_sigma + 0.5 * c.quad)
        c.loglik = loglik_from_parts(self.n, st.sigma2, c.cov.logdet, c.quad)

    # --- sweep -------------------------------------------------------------------

    def sweep(self):
        for m in range(self.M):
            self.between_model(m)
        for m in range(self.M):
            if self.state.gamma[m] and self.sizes[m] > 1:
                self.refine_theta(m)
        self.gibbs_beta()
        self.gibbs_tau2()
        self.gibbs_pi()
        for m in range(self.M):
            if self.state.gamma_rho[m]:
                self.mh_rho(m)
        self.gibbs_pi_rho()
        self.mh_nu2()
        self.gibbs_alpha()
        self.gibbs_sigma2()
        st = self.state
        for m in range(self.M):
            self.diag.dwell[m, STATES.index(st.block_state(m))] += 1
        self.diag.sweeps += 1
        if self.debug:
            st.check_invariants()

    def log_posterior(self):
        return log_prior(self.state, self.hyper, self.splines) + self.loglik()

    def check_cache(self, tol=1e-8):
        """Compare the cached log-likelihood with a from-scratch recomputation."""
        if not self.likelihood:
            return 0.0
        fresh = self._full_cache(self.state).loglik
        gap = abs(fresh - self.cache.loglik)
        if gap > tol * max(1.0, abs(fresh)):
            raise AssertionError(f"cached log-likelihood drifted by {gap}")
        return gap


def run_single_chain(dataset, spline_system, knots, hyper, config: ChainConfig, chain_id=0, state=None):
    """Run one chain and return its thinned post-burn-in draws."""
    rng = np.random.default_rng([config.seed, chain_id])
    chain = Chain(dataset, spline_system, knots, hyper, rng, likelihood=config.likelihood,
                  debug=config.debug, dense=config.dense, state=state)
    rows, its = [], []
    t0 = time.perf_counter()
    last_good = 0
    for it in range(1, config.iterations + 1):
        try:
            chain.sweep()
        except (NumericalError, LinAlgError) as exc:
            raise ChainAbort(f"chain {chain_id} aborted at iteration {it}: {exc}", last_good) from exc
        last_good = it
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            lp = chain.log_posterior()
            if config.debug and not math.isfinite(lp):
                raise AssertionError(f"non-finite log posterior at iteration {it}")
            rows.append(chain.layout.flatten(chain.state, lp))
            its.append(it)
        if config.progress_every and it % config.progress_every == 0:
            log.info("chain %d: iteration %d/%d", chain_id, it, config.iterations)
    chain.diag.runtime = time.perf_counter() - t0
    values = np.array(rows).reshape(-1, chain.layout.width)
    return PosteriorDraws(chain.layout, values, np.full(len(its), chain_id), np.array(its, dtype=int),
                          [dict(chain=chain_id, **chain.diag.to_dict())])


def _chain_worker(args):
    return run_single_chain(*args)


def run_chain(dataset, spline_system, knots, hyper, config: ChainConfig) -> PosteriorDraws:
    """Run ``config.chain_count`` independent chains and merge their draws."""
    jobs = [(dataset, spline_system, knots, hyper, config, c) for c in range(config.chain_count)]
    if config.threads > 1 and config.chain_count > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.chain_count)) as pool:
            parts = list(pool.map(_chain_worker, jobs))
    else:
        parts = [_chain_worker(j) for j in jobs]
    return PosteriorDraws.concat(parts)


def chain_config_dict(config: ChainConfig):
    return asdict(config)
