import numpy as np
import pytest

from conftest import make_dataset
from ckmr.draws import DrawLayout, PosteriorDraws
from ckmr.kernel import index_values, kernel_from_indices, select_knots
from ckmr.model import initial_state, spline_dims
from ckmr.priors import sample_uniform_halfsphere
from ckmr.splines import build_spline_system, evaluate_basis
from ckmr.summaries import (
    CurveBuilder,
    SummaryError,
    SurfacePredictor,
    compute_pips,
    indexwise_curves,
    interaction_curve_family,
    predict_surface,
    weight_summaries,
)


@pytest.fixture(scope="module")
def toy():
    ds = make_dataset([1, 2, 3], n=20, q=2, seed=17)
    sp = build_spline_system(ds, 5)
    return ds, sp


def draws_from(states, ds, sp):
    layout = DrawLayout(tuple(ds.sizes), tuple(spline_dims(sp, ds.M, "ckmr")), ds.q)
    values = np.array([layout.flatten(s, 0.0) for s in states])
    n = len(states)
    return PosteriorDraws(layout, values, np.zeros(n, int), np.arange(1, n + 1))


def random_states(ds, sp, rng, count, kernel=True):
    dims = spline_dims(sp, ds.M, "ckmr")
    out = []
    for _ in range(count):
        st = initial_state(ds.sizes, dims, ds.q)
        for m in range(ds.M):
            st.gamma[m] = int(rng.random() < 0.7)
            if st.gamma[m]:
                st.beta[m] = 0.4 * rng.standard_normal(dims[m])
                st.theta[m] = sample_uniform_halfsphere(ds.sizes[m], rng)
                if kernel and rng.random() < 0.6:
                    st.gamma_rho[m] = 1
                    st.rho[m] = rng.uniform(0.3, 1.5)
        st.nu2 = float(rng.uniform(0.5, 2))
        st.sigma2 = float(rng.uniform(0.3, 1))
        st.alpha = 0.2 * rng.standard_normal(ds.q)
        out.append(st)
    return out


def spline_part(ds, sp, st, groups=None):
    groups = ds.groups if groups is None else groups
    E = index_values(groups, st.theta)
    v = np.zeros(E.shape[0])
    for m in range(ds.M):
        if st.gamma[m]:
            v += evaluate_basis(sp, m, E[:, m]) @ st.beta[m]
    return v


# --- PIPs ----------------------------------------------------------------------------


def test_pip_examples(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 4)
    for s in sts:
        s.gamma[0] = 1
    sts[0].gamma_rho[:2] = (1, 0)
    sts[1].gamma_rho[:2] = (0, 1)
    sts[2].gamma_rho[:2] = (1, 0)
    sts[3].gamma_rho[:2] = (0, 1)
    for s in sts:
        s.gamma[1] = 1
    main, kern, joint = compute_pips(draws_from(sts, ds, sp))
    assert main[0] == 1.0
    np.testing.assert_array_equal(kern[:2], [0.5, 0.5])
    assert joint[0, 1] == 0.0
    np.testing.assert_array_equal(np.diag(joint), kern)
    assert np.all(kern <= main)


def test_pips_reject_empty(toy):
    ds, sp = toy
    d = draws_from(random_states(ds, sp, np.random.default_rng(0), 1), ds, sp)
    with pytest.raises(SummaryError):
        compute_pips(d.subset(np.zeros(1, bool)))


# --- surface prediction --------------------------------------------------------------


def test_dense_kriging_matches_conditional_mean(toy, rng):
    """At the training rows the kernel term equals E[P h | y] from explicit dense algebra."""
    ds, sp = toy
    sts = random_states(ds, sp, rng, 10)
    for s in sts:
        s.gamma[0] = s.gamma_rho[0] = 1
        s.rho[0] = 0.8
    pred = SurfacePredictor(draws_from(sts, ds, sp), ds, sp, None, dense=True)
    S = pred.training_surfaces()
    for i, st in enumerate(sts):
        E = index_values(ds.groups, st.theta)
        cols = [m for m in range(ds.M) if st.gamma[m]]
        B = np.hstack([evaluate_basis(sp, m, E[:, m]) for m in cols])
        P = np.eye(ds.n) - B @ np.linalg.pinv(B)
        K = kernel_from_indices(E, E, st.rho, same=True)
        r = ds.y - spline_part(ds, sp, st) - ds.Z @ st.alpha
        kern = st.nu2 * P @ K @ P @ np.linalg.solve(np.eye(ds.n) + st.nu2 * P @ K @ P, r)
        oracle = spline_part(ds, sp, st) + kern
        np.testing.assert_allclose(S[i], oracle, atol=1e-8 * max(1.0, np.abs(oracle).max()))


def test_gpp_training_rows_match_dense_with_same_kernel(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 5)
    for s in sts:
        s.gamma[1] = s.gamma_rho[1] = 1
        s.rho[1] = 1.1
    knots = select_knots(ds, ds.n)
    S = predict_surface(draws_from(sts, ds, sp), ds, sp, knots, ds.groups)
    for i, st in enumerate(sts):
        knots.refresh(ds, st.kernel)
        Kt = knots.blocks.approx_kernel()
        E = index_values(ds.groups, st.theta)
        cols = [m for m in range(ds.M) if st.gamma[m]]
        B = np.hstack([evaluate_basis(sp, m, E[:, m]) for m in cols])
        P = np.eye(ds.n) - B @ np.linalg.pinv(B)
        r = ds.y - spline_part(ds, sp, st) - ds.Z @ st.alpha
        kern = st.nu2 * P @ Kt @ P @ np.linalg.solve(np.eye(ds.n) + st.nu2 * P @ Kt @ P, r)
        np.testing.assert_allclose(S[i], spline_part(ds, sp, st) + kern, atol=1e-7)


def test_no_kernel_gives_spline_part(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 3)
    sts[0].nu2 = 0.0
    for s in sts[1:]:
        s.gamma_rho[:] = 0
        s.rho[:] = 0.0
    query = [g[:7] + 0.1 for g in ds.groups]
    S = predict_surface(draws_from(sts, ds, sp), ds, sp, None, query, dense=True)
    for i, st in enumerate(sts):
        np.testing.assert_allclose(S[i], spline_part(ds, sp, st, query), atol=1e-12)


def test_empty_model_is_zero(toy):
    ds, sp = toy
    st = initial_state(ds.sizes, spline_dims(sp, ds.M, "ckmr"), ds.q)
    S = predict_surface(draws_from([st], ds, sp), ds, sp, None, ds.groups, dense=True)
    assert np.all(S == 0)


def test_query_far_outside_range_warns(toy, rng):
    ds, sp = toy
    d = draws_from(random_states(ds, sp, rng, 1), ds, sp)
    far = [g[:2] * 0 + 2.5 * np.abs(g).max() for g in ds.groups]
    with pytest.warns(UserWarning, match="training range"):
        SurfacePredictor(d, ds, sp, None, dense=True).evaluate(far)


def test_sampled_kernel_weights_spread_around_mean(toy, rng):
    ds, sp = toy
    st = random_states(ds, sp, rng, 1)[0]
    st.gamma[0] = st.gamma_rho[0] = 1
    st.rho[0] = 1.0
    d = draws_from([st] * 400, ds, sp)
    mean = SurfacePredictor(d.subset(np.arange(1)), ds, sp, None, dense=True).training_surfaces()[0]
    samp = SurfacePredictor(d, ds, sp, None, dense=True, sample=True, seed=3).training_surfaces()
    assert samp.std(axis=0).max() > 0
    sem = samp.std(axis=0) / np.sqrt(samp.shape[0])
    assert np.all(np.abs(samp.mean(axis=0) - mean) < 5 * sem + 1e-12)


# --- curves ---------------------------------------------------------------------------


def test_additive_interaction_curves_coincide(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 30, kernel=False)
    for s in sts:
        s.gamma[:] = 1
        s.beta = [0.4 * rng.standard_normal(b.size) for b in s.beta]
    pred = SurfacePredictor(draws_from(sts, ds, sp), ds, sp, None, dense=True)
    fam = interaction_curve_family(pred, 0, 2)
    assert len(fam) == 3 and [c.pinned_percentile for c in fam] == [10.0, 50.0, 90.0]
    for c in fam[1:]:
        np.testing.assert_allclose(c.mean, fam[0].mean, atol=1e-10)
        np.testing.assert_allclose(c.lower, fam[0].lower, atol=1e-10)
    with pytest.raises(SummaryError):
        interaction_curve_family(pred, 1, 1)


def test_indexwise_curves_bands_and_determinism(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 25)
    for s in sts:
        s.gamma[2] = s.gamma_rho[2] = 0
        s.rho[2] = 0.0
        s.beta[2][:] = 0.0
        s.theta[2] = np.full(3, 3 ** -0.5)
    d = draws_from(sts, ds, sp)
    a = indexwise_curves(SurfacePredictor(d, ds, sp, None, dense=True), n_grid=30)
    b = indexwise_curves(SurfacePredictor(d, ds, sp, None, dense=True), n_grid=30)
    for ca, cb in zip(a, b):
        assert ca.grid.size == 30
        assert np.array_equal(ca.mean, cb.mean) and np.array_equal(ca.upper, cb.upper)
        assert np.all(ca.lower <= ca.mean + 1e-12) and np.all(ca.mean <= ca.upper + 1e-12)
    # index 3 is never included: flat zero curve with a zero-width band
    assert np.abs(a[2].mean).max() < 1e-12 and np.abs(a[2].upper - a[2].lower).max() < 1e-12


def test_curve_grid_spans_index_percentiles(toy, rng):
    ds, sp = toy
    d = draws_from(random_states(ds, sp, rng, 5), ds, sp)
    b = CurveBuilder(SurfacePredictor(d, ds, sp, None, dense=True), n_grid=50)
    for m in range(ds.M):
        g = b.grid(m)
        lo, hi = np.percentile(b.E_hat[m], [1, 99])
        assert g[0] == pytest.approx(lo) and g[-1] == pytest.approx(hi)


# --- weights --------------------------------------------------------------------------


def test_weight_summaries(toy, rng):
    ds, sp = toy
    sts = random_states(ds, sp, rng, 12)
    theta = np.array([0.6, 0.8])
    for s in sts:
        s.gamma[1] = 1
        s.theta[1] = theta
    sts[0].gamma[0] = 0
    ws = weight_summaries(draws_from(sts, ds, sp))
    assert np.all(ws[0]["q50"] == 1.0)
    assert ws[1]["count"] == 12
    for key in ("q025", "q50", "q975"):
        np.testing.assert_allclose(ws[1][key], theta, atol=1e-15)
    assert ws[2]["count"] == sum(int(s.gamma[2]) for s in sts)
