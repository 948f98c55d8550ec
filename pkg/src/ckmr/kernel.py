"""Gaussian kernels over multi-exposure indices and predictive-process algebra.

The kernel between rows ``i`` and ``i'`` is
``exp(-sum_m rho_m * ((x_im - x_i'm) . theta_m) ** 2)``. For large ``N`` the
kernel matrix is replaced by its predictive-process approximation
``K10.T @ inv(K11) @ K10`` through ``N1`` knot rows; covariance solves and
log-determinants of ``I + nu2 * P Kt P`` then reduce to ``N1 x N1``
Cholesky factorizations (Woodbury identity and the matrix determinant lemma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

JITTER_START = 1e-6
JITTER_MAX = 1e-2


class NumericalError(ArithmeticError):
    """A factorization failed even after jitter escalation."""


class KnotConfigError(ValueError):
    pass


@dataclass
class KernelParams:
    """Component weights ``rho`` (length M) and unit-norm index weights ``theta``."""

    rho: np.ndarray
    theta: list

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.theta = [np.atleast_1d(np.asarray(t, dtype=float)) for t in self.theta]

    def validate(self):
        if np.any(self.rho < 0):
            raise ValueError("rho must be non-negative")
        for t in self.theta:
            if abs(np.linalg.norm(t) - 1.0) > 1e-10:
                raise ValueError("theta vectors must have unit norm")


def index_values(groups, theta):
    """Index matrix ``E`` with ``E[:, m] = groups[m] @ theta[m]``."""
    return np.column_stack([np.asarray(g) @ t for g, t in zip(groups, theta)])


def kernel_from_indices(Ea, Eb, rho, same=False):
    """Gaussian kernel between two sets of index rows."""
    rho = np.asarray(rho, dtype=float)
    active = np.flatnonzero(rho > 0)
    na, nb = Ea.shape[0], Eb.shape[0]
    if active.size == 0:
        return np.ones((na, nb))
    w = np.sqrt(rho[active])
    A = Ea[:, active] * w
    B = Eb[:, active] * w
    if active.size <= 4:
        # direct differences: exact and cheap for a few active indices
        diff = A[:, 0, None] - B[None, :, 0]
        d2 = diff * diff
        for a in range(1, active.size):
            diff = A[:, a, None] - B[None, :, a]
            diff *= diff
            d2 += diff
    else:
        d2 = A @ B.T
        d2 *= -2.0
        d2 += (A * A).sum(1)[:, None]
        d2 += (B * B).sum(1)[None, :]
        np.maximum(d2, 0.0, out=d2)
    if same:
        if active.size > 4:
            # gemm rounding is not symmetric; mirror the upper triangle
            iu = np.triu_indices(na, 1)
            d2.T[iu] = d2[iu]
        np.fill_diagonal(d2, 0.0)
    d2 *= -1.0
    return np.exp(d2, out=d2)


def kernel_matrix(X_groups, params: KernelParams, rows_a=None, rows_b=None):
    """Kernel matrix between ``rows_a`` and ``rows_b`` of the grouped exposures.

    ``None`` selects every row. When both row sets are identical the result is
    symmetric with a unit diagonal.
    """
    E = index_values(X_groups, params.theta)
    Ea = E if rows_a is None else E[np.asarray(rows_a)]
    Eb = E if rows_b is None else E[np.asarray(rows_b)]
    same = (rows_a is None and rows_b is None) or (
        rows_a is not None and rows_b is not None and np.array_equal(rows_a, rows_b)
    )
    return kernel_from_indices(Ea, Eb, params.rho, same=same)


def jitter_cholesky(A, start=JITTER_START, max_jitter=JITTER_MAX):
    """Lower Cholesky factor of ``A + jitter * I`` with escalating jitter.

    Tries ``start`` first and multiplies by ten up to ``max_jitter``. Returns
    ``(L, jitter)``. Only the lower triangle of ``A`` is referenced.
    """
    jitter = start
    while True:
        if jitter:
            Aj = A.copy()
            Aj.flat[:: A.shape[0] + 1] += jitter
        else:
            Aj = A
        try:
            return cholesky(Aj, lower=True, check_finite=False), jitter
        except LinAlgError:
            pass
        if jitter >= max_jitter:
            raise NumericalError(f"Cholesky failed with jitter up to {max_jitter:g}")
        jitter = JITTER_START if jitter == 0 else jitter * 10.0
        jitter = min(jitter, max_jitter)


def safe_cholesky(A):
    try:
        return cholesky(A, lower=True, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise NumericalError(str(exc)) from exc


@dataclass
class KernelBlocks:
    """Knot kernel blocks for one kernel state.

    ``K11`` already includes the jitter and ``chol11`` is its lower factor.
    ``V = inv(chol11) @ K10`` is the whitened cross block, so ``Kt = V.T @ V``;
    ``H = V @ V.T`` is cached because every projection reuses it.
    """

    K11: np.ndarray
    K10: np.ndarray
    chol11: np.ndarray
    V: np.ndarray
    H: np.ndarray
    jitter: float

    @property
    def n_knots(self):
        return self.K11.shape[0]

    def approx_kernel(self):
        """Dense ``K10.T inv(K11) K10`` (tests and small problems only)."""
        V = cho_solve((self.chol11, True), self.K10, check_finite=False)
        return self.K10.T @ V


def kernel_blocks(E_knots, E_data, rho, jitter=JITTER_START) -> KernelBlocks | None:
    """Blocks for the current kernel, or ``None`` when every ``rho`` is zero.

    With all weights zero the kernel is the all-ones matrix, which is handled
    exactly by the rank-one path in :class:`CovarianceFactor`.
    """
    if not np.any(np.asarray(rho) > 0):
        return None
    K11 = kernel_from_indices(E_knots, E_knots, rho, same=True)
    K10 = kernel_from_indices(E_knots, E_data, rho)
    L, used = jitter_cholesky(K11, start=jitter)
    if used:
        K11.flat[:: K11.shape[0] + 1] += used
    V = solve_triangular(L, K10, lower=True, check_finite=False)
    return KernelBlocks(K11=K11, K10=K10, chol11=L, V=V, H=V @ V.T, jitter=used)


class CovarianceFactor:
    """Factorization of ``I + nu2 * P Kt P`` for solves and log-determinants.

    ``Q`` is an orthonormal basis of the null space of ``P`` (so
    ``P v = v - Q (Q.T v)``); an empty ``Q`` means ``P = I``. ``blocks=None``
    stands for the all-ones kernel.

    With ``Kt = V.T V`` both the solve and the determinant go through the
    ``N1 x N1`` matrix ``D = I + nu2 * V P V.T``. Its eigenvalues are all at
    least one, so unlike ``K11 + nu2 * K10 P K10.T`` it stays well conditioned
    however close to singular ``K11`` is.
    """

    def __init__(self, blocks: KernelBlocks | None, Q, nu2, n):
        self.blocks = blocks
        self.Q = Q
        self.nu2 = float(nu2)
        self.n = n
        self._has_q = Q is not None and Q.shape[1] > 0
        if self.nu2 == 0.0:
            self.logdet = 0.0
            return
        if blocks is None:
            u = self.project(np.ones(n))
            self._u = u
            self._uu = float(u @ u)
            self.logdet = float(np.log1p(self.nu2 * self._uu))
            return
        if self._has_q:
            W = blocks.V @ Q
            D = W @ W.T
            D -= blocks.H
            D *= -self.nu2
        else:
            D = self.nu2 * blocks.H
        D.flat[:: D.shape[0] + 1] += 1.0
        # only the lower triangle is read, so no explicit symmetrization
        self._chol = safe_cholesky(D)
        self.logdet = 2.0 * float(np.log(np.diag(self._chol)).sum())

    def project(self, v):
        if not self._has_q:
            return v
        return v - self.Q @ (self.Q.T @ v)

    def quad(self, r):
        """``r.T inv(I + nu2 P Kt P) r``."""
        rr = float(r @ r)
        if self.nu2 == 0.0:
            return rr
        pr = self.project(r)
        if self.blocks is None:
            ur = float(self._u @ pr)
            return rr - self.nu2 * ur * ur / (1.0 + self.nu2 * self._uu)
        a = self.blocks.V @ pr
        v = cho_solve((self._chol, True), a, check_finite=False)
        return rr - self.nu2 * float(a @ v)

    def solve(self, V):
        """``inv(I + nu2 P Kt P) @ V`` for a vector or matrix ``V``."""
        V = np.asarray(V, dtype=float)
        if self.nu2 == 0.0:
            return V.copy()
        pv = self.project(V)
        if self.blocks is None:
            coef = (self._u @ pv) / (1.0 + self.nu2 * self._uu)
            return V - self.nu2 * np.multiply.outer(self._u, coef)
        a = self.blocks.V @ pv
        s = cho_solve((self._chol, True), a, check_finite=False)
        return V - self.nu2 * self.project(self.blocks.V.T @ s)


@dataclass
class GppKnots:
    """Knot rows in standardized exposure space plus the current kernel blocks."""

    rows: np.ndarray
    group_slices: list
    jitter: float = JITTER_START
    blocks: KernelBlocks | None = None

    @property
    def n_knots(self):
        return self.rows.shape[0]

    def index_values(self, theta):
        return index_values([self.rows[:, s] for s in self.group_slices], theta)

    def refresh(self, dataset, params: KernelParams):
        """Recompute the cached kernel blocks for ``params``."""
        E_data = index_values(dataset.groups, params.theta)
        self.blocks = kernel_blocks(self.index_values(params.theta), E_data, params.rho, self.jitter)
        return self.blocks


def select_knots(dataset, n_knots, seed=0, jitter=JITTER_START) -> GppKnots:
    """Choose ``n_knots`` knot rows by k-means (k-means++ start, 25 iterations).

    With ``n_knots == N`` the knots are exactly the data rows, in order.
    """
    X = dataset.X
    n = X.shape[0]
    n_knots = int(n_knots)
    if n_knots > n:
        raise KnotConfigError(f"cannot place {n_knots} knots with only {n} observations")
    if n_knots < 1:
        raise KnotConfigError("need at least one knot")
    if n_knots == n:
        rows = X.copy()
    elif n_knots == 1:
        rows = X.mean(axis=0, keepdims=True)
    else:
        rng = np.random.default_rng(seed)
        rows, _ = kmeans2(X, n_knots, iter=25, minit="++", seed=rng, missing="warn")
    return GppKnots(rows=np.asarray(rows, dtype=float), group_slices=dataset.group_slices, jitter=jitter)


def default_n_knots(n):
    return min(100, n)


def gpp_quadform(knots: GppKnots, P, nu2, r):
    """``r.T inv(I + nu2 P Kt P) r`` using the cached blocks of ``knots``."""
    r = np.asarray(r, dtype=float)
    Q = None if P is None else P.Q
    return CovarianceFactor(knots.blocks, Q, nu2, r.shape[0]).quad(r)


def gpp_logdet(knots: GppKnots, P, nu2, n=None):
    """``log det(I + nu2 P Kt P)``; always non-negative."""
    Q = None if P is None else P.Q
    if n is None:
        n = knots.blocks.K10.shape[1] if knots.blocks is not None else P.n
    return CovarianceFactor(knots.blocks, Q, nu2, n).logdet
