import numpy as np
import pytest

from ckmr.data import ExposureDataset


def make_dataset(sizes, n=40, q=1, seed=0, y=None):
    """Random standardized-ish dataset with the given group sizes."""
    rng = np.random.default_rng(seed)
    groups = [rng.standard_normal((n, L)) for L in sizes]
    Z = np.column_stack([np.ones(n)] + [rng.standard_normal(n) for _ in range(q - 1)])
    if y is None:
        y = rng.standard_normal(n)
    names = [f"g{m + 1}" for m in range(len(sizes))]
    comps = [[f"g{m + 1}_{l + 1}" for l in range(L)] for m, L in enumerate(sizes)]
    conf = ["(Intercept)"] + [f"z{k}" for k in range(1, q)]
    return ExposureDataset(y=y, groups=groups, Z=Z, group_names=names, component_names=comps,
                           confounder_names=conf)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
