"""Posterior summaries: inclusion probabilities, surfaces, curves and weights.

Surface prediction works per stored draw. The kernel part is represented
through the knot values: with ``K11 = L L.T`` and ``Phi = K10.T L^-T`` the
(predictive-process) kernel function is ``h = Phi w``, ``w ~ N(0, nu2 sigma2 I)``,
so given the rest of the draw

    w | y ~ N(A^-1 Phi.T P r, sigma2 A^-1),   A = Phi.T P Phi + I / nu2.

The posterior mean of ``w`` reproduces the usual kriging formula
``nu2 k*.T P (I + nu2 P Kt P)^-1 r``; drawing ``w`` instead gives intervals
that include the kernel-function uncertainty. The projected function at new
rows subtracts the spline-space component fitted at the training rows, which
is the same as folding ``-c`` into the spline coefficients. With the exact
kernel and no sampling the mean is formed directly as ``h = K a``,
``a = nu2 P (I + nu2 P K P)^-1 r``, which avoids factoring a possibly
singular ``K``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .kernel import index_values, jitter_cholesky, kernel_from_indices
from .model import Projection, basis_blocks, projection_columns, spline_dims
from .priors import equal_weights
from .splines import evaluate_basis

QUANTILES = (2.5, 97.5)
RANGE_SLACK = 0.2


class SummaryError(ValueError):
    pass


# --- inclusion probabilities ------------------------------------------------------


def compute_pips(draws):
    """Main, kernel and joint interaction inclusion probabilities."""
    if draws.n_draws == 0:
        raise SummaryError("no draws to summarize")
    g = draws.gamma().astype(float)
    gr = draws.gamma_rho().astype(float)
    main = g.mean(axis=0)
    kernel = gr.mean(axis=0)
    joint = gr.T @ gr / gr.shape[0]
    return main, kernel, joint


# --- surface prediction -------------------------------------------------------------


@dataclass
class _DrawSurface:
    theta: list
    rho: np.ndarray
    coef: list  # effective spline coefficients per index (None when unused)
    knot_E: np.ndarray | None = None
    knot_weights: np.ndarray | None = None


class SurfacePredictor:
    """Per-draw surfaces ``sum_m B_m(E_m) b_m + (P h)(x)`` at arbitrary exposure rows."""

    def __init__(self, draws, dataset, spline_system, knots, mode="ckmr", sample=False, seed=0,
                 dense=False):
        if draws.n_draws == 0:
            raise SummaryError("no draws to summarize")
        if list(draws.layout.sizes) != list(dataset.sizes) or draws.layout.q != dataset.q:
            raise SummaryError("draws do not match the dataset layout")
        self.dataset = dataset
        self.splines = spline_system
        self.mode = mode
        self.dims = spline_dims(spline_system, dataset.M, mode)
        if list(self.dims) != list(draws.layout.dims):
            raise SummaryError("draws do not match the spline system")
        self.knots = None if dense else knots
        self.sample = sample
        self.seed = seed
        self.draws = draws
        rng = np.random.default_rng([seed, 7])
        X = dataset.X
        self._lo = X.min(axis=0)
        self._hi = X.max(axis=0)
        self.surfaces = [self._prepare(draws.state(i), rng) for i in range(draws.n_draws)]

    @property
    def n_draws(self):
        return len(self.surfaces)

    def _knot_groups(self):
        return [self.knots.rows[:, s] for s in self.knots.group_slices]

    def _prepare(self, st, rng):
        data = self.dataset
        n = data.n
        E = index_values(data.groups, st.theta)
        blocks = basis_blocks(self.splines, E, self.mode)
        coef = [None] * data.M
        fit = np.zeros(n)
        for m in range(data.M):
            if self.dims[m] and st.gamma[m]:
                coef[m] = st.beta[m].copy()
                fit += blocks[m] @ st.beta[m]
        out = _DrawSurface(theta=[t.copy() for t in st.theta], rho=st.rho.copy(), coef=coef)
        if not np.any(st.rho > 0) or st.nu2 <= 0:
            # constant (all-ones) or absent kernel: contributes no shape to the surface
            return out
        cols = [m for m in projection_columns(st.gamma, self.mode, data.M) if self.dims[m]]
        proj = Projection(np.hstack([blocks[m] for m in cols]) if cols else None, n)
        r = data.y - fit - data.Z @ st.alpha
        if self.knots is None and not self.sample:
            # exact kernel, mean only: h = K a with a = nu2 P S^-1 r, no factor of K needed
            Ek = E
            K10 = kernel_from_indices(E, E, st.rho, same=True)
            PKP = proj.apply(proj.apply(K10).T)
            S = np.eye(n) + st.nu2 * 0.5 * (PKP + PKP.T)
            LS, _ = jitter_cholesky(S, start=0.0)
            alpha_w = st.nu2 * proj.apply(cho_solve((LS, True), r, check_finite=False))
        else:
            if self.knots is None:
                # sampled kernel functions need a factor of K; jitter only if it is singular
                Ek = E
                K11 = kernel_from_indices(E, E, st.rho, same=True)
                K10 = K11
                L, _ = jitter_cholesky(K11, start=0.0)
            else:
                Ek = index_values(self._knot_groups(), st.theta)
                K11 = kernel_from_indices(Ek, Ek, st.rho, same=True)
                K10 = kernel_from_indices(Ek, E, st.rho)
                L, _ = jitter_cholesky(K11, start=self.knots.jitter)
            Phi = solve_triangular(L, K10, lower=True, check_finite=False).T  # N x N1
            PPhi = proj.apply(Phi)
            A = Phi.T @ PPhi
            A[np.diag_indices_from(A)] += 1.0 / st.nu2
            try:
                LA = cholesky(A, lower=True, check_finite=False)
            except LinAlgError:
                LA, _ = jitter_cholesky(A)
            w = cho_solve((LA, True), PPhi.T @ r, check_finite=False)
            if self.sample:
                z = rng.standard_normal(w.size)
                w = w + math.sqrt(st.sigma2) * solve_triangular(LA.T, z, lower=False, check_finite=False)
            alpha_w = solve_triangular(L.T, w, lower=False, check_finite=False)
        out.knot_E = Ek
        out.knot_weights = alpha_w
        if cols:
            h_train = K10.T @ alpha_w
            c = proj.coefficients(h_train)
            k = 0
            for m in cols:
                d = self.dims[m]
                base = coef[m] if coef[m] is not None else np.zeros(d)
                coef[m] = base - c[k:k + d]
                k += d
        return out

    def _check_range(self, query_groups):
        Xq = np.hstack(query_groups)
        span = self._hi - self._lo
        lo = self._lo - RANGE_SLACK * span
        hi = self._hi + RANGE_SLACK * span
        if np.any(Xq < lo) or np.any(Xq > hi):
            warnings.warn("query exposures extend beyond the training range by more than 20%", stacklevel=3)

    def evaluate(self, query_groups, draws=None):
        """Surface values, shape ``(n_draws, n_query)``."""
        query_groups = [np.atleast_2d(np.asarray(g, dtype=float)) for g in query_groups]
        self._check_range(query_groups)
        nq = query_groups[0].shape[0]
        idx = range(self.n_draws) if draws is None else draws
        out = np.zeros((len(idx), nq))
        for row, i in enumerate(idx):
            s = self.surfaces[i]
            Eq = index_values(query_groups, s.theta)
            v = out[row]
            for m, b in enumerate(s.coef):
                if b is not None:
                    # spline terms are held constant beyond the knot range
                    c = self.splines[m].c
                    v += evaluate_basis(self.splines, m, np.clip(Eq[:, m], -c, c)) @ b
            if s.knot_weights is not None:
                v += kernel_from_indices(Eq, s.knot_E, s.rho) @ s.knot_weights
        return out

    def training_surfaces(self):
        return self.evaluate(self.dataset.groups)


def predict_surface(draws, dataset, spline_system, knots, query_groups, mode="ckmr", sample=False,
                    seed=0, dense=False):
    """Per-draw surface values at the query rows (list of per-group matrices)."""
    pred = SurfacePredictor(draws, dataset, spline_system, knots, mode=mode, sample=sample, seed=seed,
                            dense=dense)
    return pred.evaluate(query_groups)


def center_rows(S):
    return S - S.mean(axis=1, keepdims=True)


# --- curves ------------------------------------------------------------------------


@dataclass
class CurveGrid:
    index: int
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower50: np.ndarray
    upper50: np.ndarray
    pinned: int | None = None
    pinned_percentile: float | None = None
    pinned_value: float | None = None


def posterior_mean_direction(draws, m):
    """Renormalized mean of the inclusion-conditional weight draws of index ``m``."""
    L = draws.layout.sizes[m]
    if L == 1:
        return np.ones(1)
    inc = draws.gamma()[:, m] == 1
    if not inc.any():
        return equal_weights(L)
    T = draws.theta(m)[inc]
    ref = T[0]
    signs = np.where(T @ ref < 0, -1.0, 1.0)
    mean = (T * signs[:, None]).mean(axis=0)
    nrm = np.linalg.norm(mean)
    return mean / nrm if nrm > 0 else equal_weights(L)


def _summarize(index, grid, S, **extra):
    S = center_rows(S)
    q = np.percentile(S, [2.5, 25.0, 75.0, 97.5], axis=0)
    return CurveGrid(index=index, grid=grid, mean=S.mean(axis=0), lower=q[0], upper=q[3], lower50=q[1],
                     upper50=q[2], **extra)


class CurveBuilder:
    """Shared grid construction for indexwise and interaction curves."""

    def __init__(self, predictor: SurfacePredictor, n_grid=50):
        self.pred = predictor
        draws = predictor.draws
        data = predictor.dataset
        self.M = data.M
        self.n_grid = n_grid
        self.theta_hat = [posterior_mean_direction(draws, m) for m in range(self.M)]
        self.E_hat = [data.groups[m] @ self.theta_hat[m] for m in range(self.M)]
        self.medians = [float(np.median(e)) for e in self.E_hat]

    def grid(self, m):
        lo, hi = np.percentile(self.E_hat[m], [1.0, 99.0])
        return np.linspace(lo, hi, self.n_grid)

    def _query(self, m, grid, pins=None):
        pins = pins or {}
        groups = []
        for k in range(self.M):
            if k == m:
                vals = grid
            else:
                vals = np.full(grid.size, pins.get(k, self.medians[k]))
            groups.append(vals[:, None] * self.theta_hat[k][None, :])
        return groups

    def indexwise(self, m):
        g = self.grid(m)
        return _summarize(m, g, self.pred.evaluate(self._query(m, g)))

    def interaction(self, j, k, percentiles=(10, 50, 90)):
        if j == k:
            raise SummaryError("interaction curves need two distinct indices")
        g = self.grid(j)
        out = []
        for pct in percentiles:
            val = float(np.percentile(self.E_hat[k], pct))
            S = self.pred.evaluate(self._query(j, g, {k: val}))
            out.append(_summarize(j, g, S, pinned=k, pinned_percentile=float(pct), pinned_value=val))
        return tuple(out)


def indexwise_curves(predictor: SurfacePredictor, n_grid=50):
    b = CurveBuilder(predictor, n_grid)
    return [b.indexwise(m) for m in range(b.M)]


def interaction_curve_family(predictor: SurfacePredictor, j, k, percentiles=(10, 50, 90), n_grid=50):
    return CurveBuilder(predictor, n_grid).interaction(j, k, percentiles)


def interaction_separation(curves):
    """Largest gap between the posterior-mean curves of a family."""
    means = np.array([c.mean for c in curves])
    return float((means.max(axis=0) - means.min(axis=0)).max())


# --- weights -------------------------------------------------------------------------


def weight_summaries(draws):
    """Per index: inclusion-conditional (2.5, 50, 97.5) percentiles of each weight."""
    out = []
    g = draws.gamma()
    for m, L in enumerate(draws.layout.sizes):
        inc = g[:, m] == 1
        T = draws.theta(m)[inc]
        if L == 1:
            q = np.ones((3, 1))
        elif T.shape[0] == 0:
            q = np.full((3, L), np.nan)
        else:
            q = np.percentile(T, [2.5, 50.0, 97.5], axis=0)
        out.append({"index": m, "count": int(inc.sum()), "q025": q[0], "q50": q[1], "q975": q[2]})
    return out


# --- output files ------------------------------------------------------------------------


def _f(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def select_pairs(joint, max_pairs=10):
    """Ordered index pairs with the largest joint interaction PIP (ties by position)."""
    M = joint.shape[0]
    pairs = [(j, k) for j in range(M) for k in range(M) if j < k]
    pairs.sort(key=lambda jk: (-joint[jk], jk))
    return pairs[:max_pairs]


def write_summaries(out_dir, draws, dataset, spline_system, knots, mode, meta, seed=0, n_grid=50,
                    max_pairs=10, plot=False, dense=False):
    """Write pips/curves/interactions/weights CSVs and summary.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(dataset.group_names)
    main, kern, joint = compute_pips(draws)
    with (out / "pips.csv").open("w", encoding="utf-8") as fh:
        fh.write("index_j,index_k,name_j,name_k,type,pip\n")
        for m in range(len(names)):
            fh.write(f"{m + 1},{m + 1},{names[m]},{names[m]},main,{_f(main[m])}\n")
        for m in range(len(names)):
            fh.write(f"{m + 1},{m + 1},{names[m]},{names[m]},kernel,{_f(kern[m])}\n")
        for j in range(len(names)):
            for k in range(len(names)):
                if j != k:
                    fh.write(f"{j + 1},{k + 1},{names[j]},{names[k]},joint,{_f(joint[j, k])}\n")

    pred = SurfacePredictor(draws, dataset, spline_system, knots, mode=mode, sample=True, seed=seed, dense=dense)
    builder = CurveBuilder(pred, n_grid)
    curves = [builder.indexwise(m) for m in range(dataset.M)]
    with (out / "curves.csv").open("w", encoding="utf-8") as fh:
        fh.write("index,name,grid,mean,lo,hi,lo50,hi50\n")
        for c in curves:
            for i in range(c.grid.size):
                fh.write(f"{c.index + 1},{names[c.index]},{_f(c.grid[i])},{_f(c.mean[i])},{_f(c.lower[i])},"
                         f"{_f(c.upper[i])},{_f(c.lower50[i])},{_f(c.upper50[i])}\n")

    pairs = select_pairs(joint, max_pairs) if dataset.M > 1 else []
    families = {}
    with (out / "interactions.csv").open("w", encoding="utf-8") as fh:
        fh.write("index_j,index_k,percentile,pinned_value,grid,mean,lo,hi\n")
        for j, k in pairs:
            fam = builder.interaction(j, k)
            families[(j, k)] = fam
            for c in fam:
                for i in range(c.grid.size):
                    fh.write(f"{j + 1},{k + 1},{_f(c.pinned_percentile)},{_f(c.pinned_value)},{_f(c.grid[i])},"
                             f"{_f(c.mean[i])},{_f(c.lower[i])},{_f(c.upper[i])}\n")

    weights = weight_summaries(draws)
    with (out / "weights.csv").open("w", encoding="utf-8") as fh:
        fh.write("index,name,component,count,q025,q50,q975\n")
        for w in weights:
            m = w["index"]
            for l, comp in enumerate(dataset.component_names[m]):
                fh.write(f"{m + 1},{names[m]},{comp},{w['count']},{_f(w['q025'][l])},{_f(w['q50'][l])},"
                         f"{_f(w['q975'][l])}\n")

    summary = dict(meta)
    summary["summaries"] = {
        "n_draws": int(draws.n_draws),
        "chains": sorted(int(c) for c in set(draws.chain.tolist())),
        "main_pip": [float(v) for v in main],
        "kernel_pip": [float(v) for v in kern],
        "interaction_pairs": [[j + 1, k + 1] for j, k in pairs],
        "curve_seed": int(seed),
        "conventions": {
            "surface_centering": "per-draw surfaces centered over the grid (curves) or over training rows (fit metrics)",
            "curve_direction": "posterior mean of inclusion-conditional weights, renormalized",
            "curve_intervals": "kernel function drawn from its conditional posterior per stored draw",
            "other_indices": "held at the median of their index values",
            "weights": "percentiles over draws in which the index is included",
        },
    }
    with (out / "summary.json").open("w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if plot:
        from .plotting import write_curve_svg, write_pip_svg

        write_curve_svg(out / "curves.svg", curves, names)
        write_pip_svg(out / "pips.svg", main, joint, names)
        for (j, k), fam in families.items():
            write_curve_svg(out / f"interaction_{j + 1}_{k + 1}.svg", list(fam), names,
                            labels=[f"{names[k]} p{int(c.pinned_percentile)}" for c in fam])
    return summary
