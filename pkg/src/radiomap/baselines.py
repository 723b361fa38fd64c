"""Interpolation baselines: inverse distance weighting and ordinary kriging."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .scene import ObservationSet, Radiomap

log = logging.getLogger(__name__)


def _grid_cells(H: int, W: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def idw_band(cells: np.ndarray, values: np.ndarray, H: int, W: int, power: float = 2.0
             ) -> np.ndarray:
    grid = _grid_cells(H, W)
    d = _pairwise(grid, np.asarray(cells, dtype=np.float64))
    hit = d == 0
    with np.errstate(divide="ignore"):
        w = np.where(hit, 0.0, d ** -power)
    est = (w @ values) / w.sum(axis=1).clip(min=np.finfo(float).tiny)
    rows, cols = np.nonzero(hit)
    est[rows] = values[cols]
    return est.reshape(H, W)


def idw_interpolate(obs: ObservationSet, H: int | None = None, W: int | None = None,
                    power: float = 2.0) -> Radiomap:
    H, W = obs.shape if H is None else (H, W)
    bands = [idw_band(obs.cells[f], obs.values[f], H, W, power) for f in range(obs.n_bands)]
    return Radiomap(values=np.stack(bands, axis=-1), calibration=[(0.0, 1.0)] * obs.n_bands)


# ---------------------------------------------------------------- kriging


@dataclass(frozen=True)
class ExponentialVariogram:
    """gamma(h) = nugget + sill * (1 - exp(-h / range_)) for h > 0, gamma(0) = 0."""

    nugget: float
    sill: float
    range_: float

    def __call__(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + self.sill * (1.0 - np.exp(-h / self.range_))
        return np.where(h > 0, g, 0.0)


def fit_variogram(cells: np.ndarray, values: np.ndarray, n_bins: int = 10,
                  n_ranges: int = 40) -> ExponentialVariogram:
    """Method-of-moments: binned empirical semivariogram, then a range scan with
    non-negative least squares for (nugget, sill) at each candidate range."""
    cells = np.asarray(cells, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    var = float(np.var(values))
    span = float(np.ptp(cells, axis=0).max()) if n > 1 else 1.0
    fallback = ExponentialVariogram(0.0, max(var, 1e-6), max(span / 3.0, 1.0))
    if n < 3 or var <= 0:
        return fallback
    i, j = np.triu_indices(n, k=1)
    h = np.hypot(*(cells[i] - cells[j]).T)
    semi = 0.5 * (values[i] - values[j]) ** 2
    edges = np.linspace(0.0, h.max() * (1 + 1e-9), n_bins + 1)
    which = np.digitize(h, edges) - 1
    lags, gam, wts = [], [], []
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            lags.append(h[sel].mean())
            gam.append(semi[sel].mean())
            wts.append(np.sqrt(sel.sum()))
    lags, gam, wts = map(np.asarray, (lags, gam, wts))
    if len(lags) < 2:
        return fallback
    best, best_err = fallback, np.inf
    for r in np.geomspace(0.5, 2.0 * h.max(), n_ranges):
        A = np.stack([np.ones_like(lags), 1.0 - np.exp(-lags / r)], axis=1)
        coef, err = nnls(A * wts[:, None], gam * wts)
        if coef[1] > 0 and err < best_err:
            best, best_err = ExponentialVariogram(float(coef[0]), float(coef[1]), float(r)), err
    return best


class KrigingError(RuntimeError):
    pass


def kriging_weights(cells: np.ndarray, targets: np.ndarray, vario: ExponentialVariogram
                    ) -> np.ndarray:
    """Ordinary-kriging weights, shape (n_targets, N); each row sums to 1."""
    cells = np.asarray(cells, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(cells)
    A = np.ones((n + 1, n + 1))
    A[:n, :n] = vario(_pairwise(cells, cells))
    A[n, n] = 0.0
    rhs = np.ones((n + 1, len(targets)))
    rhs[:n] = vario(_pairwise(cells, targets))
    if np.linalg.cond(A) > 1e12:
        raise KrigingError("ordinary kriging system is singular")
    sol = np.linalg.solve(A, rhs)
    return sol[:n].T


def ordinary_kriging(obs: ObservationSet, H: int | None = None, W: int | None = None,
                     variogram: ExponentialVariogram | None = None, fallback: bool = True
                     ) -> tuple[Radiomap, bool]:
    """Kriged map plus a flag telling whether any band fell back to IDW."""
    H, W = obs.shape if H is None else (H, W)
    grid = _grid_cells(H, W)
    bands, used_fallback = [], False
    for f in range(obs.n_bands):
        cells, values = obs.cells[f], np.asarray(obs.values[f], dtype=np.float64)
        try:
            if len(values) < 2:
                raise KrigingError("ordinary kriging needs at least 2 observations")
            vario = variogram or fit_variogram(cells, values)
            w = kriging_weights(cells, grid, vario)
            bands.append((w @ values).reshape(H, W))
        except KrigingError as exc:
            if not fallback:
                raise
            log.info("kriging band %d fell back to IDW: %s", f, exc)
            used_fallback = True
            bands.append(idw_band(cells, values, H, W))
    return Radiomap(values=np.stack(bands, axis=-1), calibration=[(0.0, 1.0)] * obs.n_bands), \
        used_fallback
