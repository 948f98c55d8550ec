"""Cubic B-spline bases for index effects with a diagonalized roughness penalty.

Each index gets a cubic B-spline basis on equally spaced knots covering
``[-c, c]`` where ``c`` bounds every achievable index value for unit-norm
weights. The raw basis is constrained to be centered over the training rows
(evaluated at equal weights), which drops one function, and then rotated so
that the integrated squared second derivative penalty becomes diagonal. The
final coordinate spans the linear functions, carries no penalty, and is
scaled so that its basis function is exactly ``e - mean(e_train)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

DEGREE = 3
DEFAULT_DF = 9
KNOT_MARGIN = 1.05
GAUSS_NODES = 5


class SplineConfigError(ValueError):
    pass


class DegenerateIndexError(ValueError):
    pass


class IndexRangeError(ValueError):
    pass


def uniform_knots(c, n_basis, degree=DEGREE):
    """Extended knot vector with base interval ``[-c, c]``."""
    n_intervals = n_basis - degree
    h = 2.0 * c / n_intervals
    return -c + h * (np.arange(n_basis + degree + 1) - degree)


def raw_basis(t, e, degree=DEGREE):
    """Dense B-spline design matrix (len(e) x n_basis) on knot vector ``t``."""
    e = np.asarray(e, dtype=float)
    return BSpline.design_matrix(e, t, degree, extrapolate=False).toarray()


def second_derivative_gram(t, degree=DEGREE, nodes=GAUSS_NODES):
    """Gram matrix of integrated products of basis second derivatives.

    Integrates piecewise over every knot interval inside the base range with
    Gauss-Legendre quadrature, which is exact for cubic splines.
    """
    n_basis = len(t) - degree - 1
    spline = BSpline(t, np.eye(n_basis), degree, extrapolate=False)
    d2 = spline.derivative(2)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    breaks = t[degree:n_basis + 1]
    gram = np.zeros((n_basis, n_basis))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        x = 0.5 * (a + b) + half * xg
        vals = d2(x)
        gram += (vals.T * (wg * half)) @ vals
    return 0.5 * (gram + gram.T)


@dataclass(frozen=True)
class IndexSpline:
    """Basis for one index: knots, constraint/rotation and penalty diagonal."""

    knots: np.ndarray
    c: float
    transform: np.ndarray  # (df + 1) x d, raw coefficients -> penalty-diagonal coordinates
    penalty: np.ndarray  # length d, last entry exactly zero
    degree: int = DEGREE

    @property
    def dim(self):
        return self.transform.shape[1]

    def evaluate(self, e):
        e = np.atleast_1d(np.asarray(e, dtype=float))
        bad = np.abs(e) > self.c * (1.0 + 1e-12)
        if bad.any():
            raise IndexRangeError(
                f"index value {e[bad][0]!r} lies outside the knot range [-{self.c}, {self.c}]"
            )
        e = np.clip(e, -self.c, self.c)
        return raw_basis(self.knots, e, self.degree) @ self.transform


@dataclass(frozen=True)
class SplineSystem:
    """Per-index spline bases; immutable after construction."""

    splines: tuple

    def __len__(self):
        return len(self.splines)

    def __getitem__(self, j):
        return self.splines[j]

    @property
    def dims(self):
        return [s.dim for s in self.splines]

    @property
    def total_dim(self):
        return sum(self.dims)

    def penalty(self, j):
        return self.splines[j].penalty


def evaluate_basis(system: SplineSystem, index_id: int, e):
    """Centered, penalty-diagonal basis rows for index ``index_id`` at ``e``."""
    return system[index_id].evaluate(e)


def _build_index_spline(x, df):
    if df < 4:
        raise SplineConfigError(f"df must be >= 4 for a cubic basis, got {df}")
    x = np.atleast_2d(x)
    norms = np.sqrt((x * x).sum(axis=1))
    c = KNOT_MARGIN * float(norms.max())
    if not c > 0.0:
        raise DegenerateIndexError("all exposure rows of this index are zero")
    n_raw = df + 1
    t = uniform_knots(c, n_raw)
    e0 = x @ np.full(x.shape[1], x.shape[1] ** -0.5)

    b0 = raw_basis(t, e0)
    colmeans = b0.mean(axis=0)
    # null space of the centering constraint
    qfull, _ = np.linalg.qr(colmeans[:, None], mode="complete")
    zc = qfull[:, 1:]

    gram = second_derivative_gram(t)
    sc = zc.T @ gram @ zc
    sc = 0.5 * (sc + sc.T)
    evals, evecs = np.linalg.eigh(sc)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = 1e-9 * max(evals[0], 1.0)
    if evals[-2] <= tol:
        raise DegenerateIndexError("penalty null space has more than one dimension")
    evals[-1] = 0.0

    transform = zc @ evecs
    lin_col = b0 @ transform[:, -1]
    e0c = e0 - e0.mean()
    denom = float(e0c @ e0c)
    if denom <= 0.0:
        raise DegenerateIndexError("training index values are constant")
    slope = float(lin_col @ e0c) / denom
    transform[:, -1] /= slope
    return IndexSpline(knots=t, c=c, transform=transform, penalty=evals)


def build_spline_system(dataset, df=DEFAULT_DF) -> SplineSystem:
    """Build one spline basis per index of ``dataset``.

    ``df`` is either a single integer or one integer per index; each basis
    ends up with ``df`` functions after centering.
    """
    if np.isscalar(df):
        dfs = [int(df)] * dataset.M
    else:
        dfs = [int(v) for v in df]
        if len(dfs) != dataset.M:
            raise SplineConfigError(f"need {dataset.M} df values, got {len(dfs)}")
    return SplineSystem(tuple(_build_index_spline(x, d) for x, d in zip(dataset.groups, dfs)))
