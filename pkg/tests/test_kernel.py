import math

import numpy as np
import pytest

from conftest import make_dataset
from ckmr.kernel import (
    GppKnots,
    KernelParams,
    KnotConfigError,
    NumericalError,
    gpp_logdet,
    gpp_quadform,
    jitter_cholesky,
    kernel_blocks,
    kernel_matrix,
    select_knots,
)
from ckmr.model import Projection
from ckmr.priors import sample_uniform_halfsphere


def brute_kernel(groups, rho, theta):
    n = groups[0].shape[0]
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for m, g in enumerate(groups):
                d = float(np.dot(g[i] - g[j], theta[m]))
                s += rho[m] * d * d
            K[i, j] = math.exp(-s)
    return K


def random_params(sizes, rng, rho_lo=0.0, rho_hi=2.0):
    rho = rng.uniform(rho_lo, rho_hi, len(sizes))
    theta = [sample_uniform_halfsphere(L, rng) for L in sizes]
    return KernelParams(rho, theta)


def test_all_zero_rho_gives_ones():
    ds = make_dataset([2, 1], n=7)
    K = kernel_matrix(ds.groups, KernelParams(np.zeros(2), [np.array([1.0, 0.0]), np.ones(1)]))
    assert np.array_equal(K, np.ones((7, 7)))


def test_scalar_example():
    groups = [np.array([[0.0], [1.0]])]
    K = kernel_matrix(groups, KernelParams([1.0], [np.ones(1)]))
    assert K[0, 1] == pytest.approx(0.36787944117144233, abs=1e-15)


@pytest.mark.parametrize("sizes", [(1, 2, 3), (1, 1, 1, 1, 1, 1)])
def test_matches_double_loop(rng, sizes):
    ds = make_dataset(list(sizes), n=6, seed=4)
    params = random_params(sizes, rng)
    params.rho[0] = 0.0
    K = kernel_matrix(ds.groups, params)
    np.testing.assert_allclose(K, brute_kernel(ds.groups, params.rho, params.theta), atol=1e-12, rtol=0)
    assert np.array_equal(K, K.T) and np.all(np.diag(K) == 1.0)
    assert np.all((K > 0) & (K <= 1))


def test_kernel_decreases_in_rho(rng):
    ds = make_dataset([2, 2], n=10, seed=1)
    p = random_params([2, 2], rng)
    K1 = kernel_matrix(ds.groups, p)
    p2 = KernelParams(p.rho + np.array([0.5, 0.0]), p.theta)
    K2 = kernel_matrix(ds.groups, p2)
    off = ~np.eye(10, dtype=bool)
    assert np.all(K2[off] <= K1[off])


def test_select_knots_contracts():
    ds = make_dataset([2, 1], n=30, seed=2)
    kn = select_knots(ds, 30)
    assert np.array_equal(kn.rows, ds.X)
    a = select_knots(ds, 8, seed=5)
    b = select_knots(ds, 8, seed=5)
    assert np.array_equal(a.rows, b.rows)
    with pytest.raises(KnotConfigError):
        select_knots(ds, 31)


def test_single_knot_is_the_mean():
    ds = make_dataset([2], n=40, seed=0)
    ds.groups[0][:20] += 10.0
    ds.groups[0][20:] -= 10.0
    kn = select_knots(ds, 1)
    np.testing.assert_allclose(kn.rows[0], ds.X.mean(axis=0), atol=1e-12)


def test_jitter_escalation_and_failure():
    A = np.ones((4, 4))  # rank one
    L, used = jitter_cholesky(A, start=0.0)
    assert used > 0
    np.testing.assert_allclose(L @ L.T, A + used * np.eye(4), atol=1e-12)
    with pytest.raises(NumericalError):
        jitter_cholesky(-np.eye(3))


# --- Woodbury / determinant lemma -----------------------------------------------------


def _instance(rng, n, jitter, rho_lo=0.05):
    sizes = [int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
    ds = make_dataset(sizes, n=n, seed=int(rng.integers(1 << 30)))
    params = random_params(sizes, rng, rho_lo, 3.0)
    kn = select_knots(ds, n, jitter=jitter)
    kn.refresh(ds, params)
    k = int(rng.integers(0, min(6, n // 2)))
    P = Projection(rng.standard_normal((n, k)) if k else None, n)
    nu2 = float(np.exp(rng.uniform(-2, 2)))
    r = rng.standard_normal(n)
    return ds, params, kn, P, nu2, r


def dense_oracles(Kt, P, nu2, r):
    Pd = P.dense()
    S = np.eye(len(r)) + nu2 * Pd @ Kt @ Pd
    quad = float(r @ np.linalg.solve(S, r))
    logdet = float(np.log(np.linalg.eigvalsh(0.5 * (S + S.T))).sum())
    return quad, logdet


def test_woodbury_matches_dense_same_kernel(rng):
    """Exact algebra: identical low-rank kernel on both sides."""
    for _ in range(100):
        n = int(rng.integers(5, 51))
        ds, params, kn, P, nu2, r = _instance(rng, n, 1e-6)
        Kt = kn.blocks.approx_kernel()
        q0, l0 = dense_oracles(Kt, P, nu2, r)
        assert abs(gpp_quadform(kn, P, nu2, r) - q0) <= 1e-8 * abs(q0)
        assert abs(gpp_logdet(kn, P, nu2) - l0) <= 1e-8 * max(abs(l0), 1e-300)


def test_gpp_equals_dense_kernel_when_knots_are_data(rng):
    """Unjittered knots at the data rows reproduce the exact kernel."""
    done = 0
    while done < 20:
        ds, params, kn, P, nu2, r = _instance(rng, 20, 0.0, rho_lo=1.0)
        K = kernel_matrix(ds.groups, params)
        if kn.blocks.jitter or np.linalg.cond(K) > 1e4:
            continue  # ill-conditioned K: the low-rank identity only holds to cond * eps
        done += 1
        q0, l0 = dense_oracles(K, P, nu2, r)
        assert gpp_quadform(kn, P, nu2, r) == pytest.approx(q0, rel=1e-8)
        assert gpp_logdet(kn, P, nu2) == pytest.approx(l0, rel=1e-8, abs=1e-10)


def test_bracket_forms_agree(rng):
    ds, params, kn, P, nu2, r = _instance(rng, 25, 1e-6)
    b = kn.blocks
    Pd = P.dense()
    inner1 = b.K11 + nu2 * b.K10 @ Pd @ b.K10.T
    inner2 = b.K11 + nu2 * b.K10 @ Pd @ Pd @ b.K10.T
    np.testing.assert_allclose(inner1, inner2, atol=1e-10)
    S_inv = np.eye(25) - nu2 * Pd @ b.K10.T @ np.linalg.solve(inner1, b.K10 @ Pd)
    S = np.eye(25) + nu2 * Pd @ b.approx_kernel() @ Pd
    np.testing.assert_allclose(S_inv @ S, np.eye(25), atol=1e-8)


def test_trivial_cases(rng):
    ds, params, kn, P, nu2, r = _instance(rng, 15, 1e-6)
    assert gpp_quadform(kn, P, 0.0, r) == pytest.approx(float(r @ r), rel=1e-14)
    assert gpp_logdet(kn, P, 0.0) == 0.0
    assert gpp_quadform(kn, P, nu2, np.zeros(15)) == 0.0
    assert gpp_logdet(kn, P, nu2) >= 0.0


def test_logdet_increases_in_nu2(rng):
    ds, params, kn, P, nu2, r = _instance(rng, 20, 1e-6)
    vals = [gpp_logdet(kn, P, v) for v in (0.1, 1.0, 10.0)]
    dense = [dense_oracles(kn.blocks.approx_kernel(), P, v, r)[1] for v in (0.1, 1.0, 10.0)]
    assert vals[0] < vals[1] < vals[2]
    np.testing.assert_allclose(vals, dense, rtol=1e-8)


def test_all_ones_kernel_rank_one_path(rng):
    ds = make_dataset([1, 2], n=12, seed=8)
    kn = select_knots(ds, 12)
    kn.refresh(ds, KernelParams(np.zeros(2), [np.ones(1), np.array([0.6, 0.8])]))
    assert kn.blocks is None
    P = Projection(rng.standard_normal((12, 3)), 12)
    r = rng.standard_normal(12)
    q0, l0 = dense_oracles(np.ones((12, 12)), P, 2.0, r)
    assert gpp_quadform(kn, P, 2.0, r) == pytest.approx(q0, rel=1e-10)
    assert gpp_logdet(kn, P, 2.0) == pytest.approx(l0, rel=1e-10)


def test_knot_blocks_layout():
    ds = make_dataset([2], n=9, seed=1)
    kn = select_knots(ds, 4, seed=0)
    b = kernel_blocks(kn.index_values([np.array([0.6, 0.8])]), ds.groups[0] @ np.array([0.6, 0.8]).reshape(2, 1),
                      np.array([1.0]))
    assert b.K10.shape == (4, 9) and b.K11.shape == (4, 4)
    assert isinstance(kn, GppKnots)
