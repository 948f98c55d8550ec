"""Flattened storage of posterior draws and CSV round-tripping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelState


class DrawFileError(ValueError):
    pass


@dataclass(frozen=True)
class DrawLayout:
    """Column layout for one model: index sizes, spline dims and confounder count."""

    sizes: tuple
    dims: tuple
    q: int

    @property
    def M(self):
        return len(self.sizes)

    def columns(self):
        M = self.M
        cols = [f"gamma.{m + 1}" for m in range(M)]
        cols += [f"gammarho.{m + 1}" for m in range(M)]
        cols += [f"rho.{m + 1}" for m in range(M)]
        for m, L in enumerate(self.sizes):
            cols += [f"theta.{m + 1}.{l + 1}" for l in range(L)]
        for m, d in enumerate(self.dims):
            cols += [f"beta.{m + 1}.{k + 1}" for k in range(d)]
        cols += [f"tau2.{m + 1}" for m in range(M)]
        cols += ["nu2", "sigma2"]
        cols += [f"alpha.{k + 1}" for k in range(self.q)]
        cols += ["pi", "pirho", "logpost"]
        return cols

    def _offsets(self):
        M = self.M
        off = {"gamma": 0, "gammarho": M, "rho": 2 * M, "theta": 3 * M}
        off["beta"] = off["theta"] + sum(self.sizes)
        off["tau2"] = off["beta"] + sum(self.dims)
        off["nu2"] = off["tau2"] + M
        off["sigma2"] = off["nu2"] + 1
        off["alpha"] = off["sigma2"] + 1
        off["pi"] = off["alpha"] + self.q
        off["pirho"] = off["pi"] + 1
        off["logpost"] = off["pirho"] + 1
        return off

    @property
    def width(self):
        return self._offsets()["logpost"] + 1

    def flatten(self, state: ModelState, logpost=np.nan):
        row = np.empty(self.width)
        o = self._offsets()
        M = self.M
        row[o["gamma"]:o["gamma"] + M] = state.gamma
        row[o["gammarho"]:o["gammarho"] + M] = state.gamma_rho
        row[o["rho"]:o["rho"] + M] = state.rho
        row[o["theta"]:o["beta"]] = np.concatenate(state.theta)
        if sum(self.dims):
            row[o["beta"]:o["tau2"]] = np.concatenate(state.beta)
        row[o["tau2"]:o["tau2"] + M] = state.tau2
        row[o["nu2"]] = state.nu2
        row[o["sigma2"]] = state.sigma2
        row[o["alpha"]:o["alpha"] + self.q] = state.alpha
        row[o["pi"]] = state.pi
        row[o["pirho"]] = state.pi_rho
        row[o["logpost"]] = logpost
        return row

    def unflatten(self, row) -> ModelState:
        o = self._offsets()
        M = self.M
        theta_flat = row[o["theta"]:o["beta"]]
        beta_flat = row[o["beta"]:o["tau2"]]
        theta, beta = [], []
        t0 = b0 = 0
        for L, d in zip(self.sizes, self.dims):
            theta.append(np.array(theta_flat[t0:t0 + L]))
            beta.append(np.array(beta_flat[b0:b0 + d]))
            t0 += L
            b0 += d
        return ModelState(
            gamma=row[o["gamma"]:o["gamma"] + M].astype(int),
            gamma_rho=row[o["gammarho"]:o["gammarho"] + M].astype(int),
            beta=beta,
            rho=np.array(row[o["rho"]:o["rho"] + M]),
            theta=theta,
            tau2=np.array(row[o["tau2"]:o["tau2"] + M]),
            nu2=float(row[o["nu2"]]),
            sigma2=float(row[o["sigma2"]]),
            alpha=np.array(row[o["alpha"]:o["alpha"] + self.q]),
            pi=float(row[o["pi"]]),
            pi_rho=float(row[o["pirho"]]),
        )

    @classmethod
    def from_columns(cls, columns):
        """Recover the layout from a CSV header."""
        M = sum(1 for c in columns if c.startswith("gamma.") and c.count(".") == 1)
        sizes = [0] * M
        dims = [0] * M
        q = 0
        for c in columns:
            parts = c.split(".")
            if parts[0] == "theta":
                sizes[int(parts[1]) - 1] += 1
            elif parts[0] == "beta":
                dims[int(parts[1]) - 1] += 1
            elif parts[0] == "alpha":
                q += 1
        layout = cls(tuple(sizes), tuple(dims), q)
        if layout.columns() != list(columns):
            raise DrawFileError("draw file header does not match any known layout")
        return layout


@dataclass
class PosteriorDraws:
    """Stored draws (rows) from one or more chains."""

    layout: DrawLayout
    values: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.chain = np.asarray(self.chain, dtype=int)
        self.iteration = np.asarray(self.iteration, dtype=int)

    @property
    def n_draws(self):
        return self.values.shape[0]

    def __len__(self):
        return self.n_draws

    def column(self, name):
        return self.values[:, self.layout.columns().index(name)]

    def _block(self, key, count):
        o = self.layout._offsets()[key]
        return self.values[:, o:o + count]

    def gamma(self):
        return self._block("gamma", self.layout.M).astype(int)

    def gamma_rho(self):
        return self._block("gammarho", self.layout.M).astype(int)

    def rho(self):
        return self._block("rho", self.layout.M)

    def theta(self, m):
        o = self.layout._offsets()["theta"] + sum(self.layout.sizes[:m])
        return self.values[:, o:o + self.layout.sizes[m]]

    def beta(self, m):
        o = self.layout._offsets()["beta"] + sum(self.layout.dims[:m])
        return self.values[:, o:o + self.layout.dims[m]]

    def tau2(self):
        return self._block("tau2", self.layout.M)

    def scalar(self, name):
        return self.values[:, self.layout._offsets()[name]]

    def state(self, i) -> ModelState:
        return self.layout.unflatten(self.values[i])

    def states(self):
        for i in range(self.n_draws):
            yield self.state(i)

    def subset(self, mask):
        mask = np.asarray(mask)
        return PosteriorDraws(self.layout, self.values[mask], self.chain[mask], self.iteration[mask],
                              self.diagnostics)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            raise DrawFileError("no draws to combine")
        layout = parts[0].layout
        for p in parts[1:]:
            if p.layout != layout:
                raise DrawFileError("cannot combine draws with different layouts")
        return cls(
            layout,
            np.vstack([p.values for p in parts]),
            np.concatenate([p.chain for p in parts]),
            np.concatenate([p.iteration for p in parts]),
            [d for p in parts for d in p.diagnostics],
        )

    # --- files -----------------------------------------------------------------

    def write_csv(self, path, chain=None):
        """Write the draws of one chain (or all rows) as CSV with exact float text."""
        rows = self.values if chain is None else self.values[self.chain == chain]
        its = self.iteration if chain is None else self.iteration[self.chain == chain]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", *self.layout.columns()])
            for it, row in zip(its, rows):
                w.writerow([str(int(it)), *(_fmt(v) for v in row)])

    @classmethod
    def read_csv(cls, path, chain=0):
        path = Path(path)
        if not path.exists():
            raise DrawFileError(f"draw file {path} does not exist")
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "iteration":
                raise DrawFileError(f"{path}: malformed header")
            layout = DrawLayout.from_columns(header[1:])
            its, vals = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DrawFileError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
                try:
                    its.append(int(row[0]))
                    vals.append([float(v) for v in row[1:]])
                except ValueError:
                    raise DrawFileError(f"{path}: line {lineno} contains a non-numeric field") from None
        values = np.array(vals, dtype=float).reshape(-1, layout.width)
        return cls(layout, values, np.full(len(its), chain, dtype=int), np.array(its, dtype=int))


def _fmt(v):
    return repr(float(v))
