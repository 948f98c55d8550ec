"""Synthetic data shaped like a large multi-class exposome cohort (13 classes, 65 exposures)."""

import numpy as np

COHORT_SIZES = (4, 5, 4, 9, 3, 2, 8, 4, 2, 5, 7, 10, 2)
N_COHORT = 1301
N_CONFOUNDERS = 9


def write_cohort_csv(directory, rng, n=N_COHORT):
    comps, groups = [], []
    for m, L in enumerate(COHORT_SIZES):
        for l in range(L):
            comps.append(f"e{m + 1}_{l + 1}")
            groups.append(f"class{m + 1}")
    p = len(comps)
    # within-class correlation through a shared factor
    X = np.empty((n, p))
    j = 0
    for L in COHORT_SIZES:
        f = rng.standard_normal(n)
        X[:, j:j + L] = 0.6 * f[:, None] + 0.8 * rng.standard_normal((n, L))
        j += L
    C = rng.standard_normal((n, N_CONFOUNDERS))
    e1 = X[:, :4].mean(axis=1)
    e4 = X[:, 13:22].mean(axis=1)
    y = np.sin(e1) + 0.5 * e4 ** 2 + 0.3 * e1 * e4 + C @ np.linspace(0.2, -0.2, N_CONFOUNDERS)
    y += rng.standard_normal(n)
    with (directory / "groups.csv").open("w", encoding="utf-8") as fh:
        fh.write("component,group\n")
        fh.writelines(f"{c},{g}\n" for c, g in zip(comps, groups))
    header = ["y", *comps, *(f"c{k + 1}" for k in range(N_CONFOUNDERS))]
    with (directory / "data.csv").open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(v)) for v in (y[i], *X[i], *C[i])) + "\n")
    return header
