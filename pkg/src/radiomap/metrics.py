"""Per-band MSE / NMSE on the normalized linear scale, averaged over bands."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Radiomap


@dataclass
class MetricReport:
    mse: np.ndarray  # per band
    nmse: np.ndarray  # per band
    truth_energy: np.ndarray  # per band sum of R^2 over the evaluated cells
    n_cells: int
    meta: dict = field(default_factory=dict)

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse))

    @property
    def nmse_mean(self) -> float:
        return float(np.mean(self.nmse))


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, Radiomap) else np.asarray(m, dtype=np.float64)


def compute_metrics(estimate, truth, mask: np.ndarray | None = None, **meta) -> MetricReport:
    """MSE(f) = ||est - R||^2 / n_cells and NMSE(f) = ||est - R||^2 / ||R||^2.

    ``mask`` (H, W) restricts both sums to the selected cells, e.g. open space.
    """
    est, ref = _values(estimate), _values(truth)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(ref.shape[:2], dtype=bool)
    sel = mask.astype(bool)
    err = ((est - ref) ** 2)[sel].sum(axis=0)
    energy = (ref ** 2)[sel].sum(axis=0)
    if np.any(energy == 0):
        raise ValueError("a truth band is all zero; NMSE is undefined")
    n = int(sel.sum())
    return MetricReport(mse=err / n, nmse=err / energy, truth_energy=energy, n_cells=n,
                        meta=dict(meta))


def check_scale_relation(report: MetricReport, tol: float = 1e-12) -> bool:
    """MSE(f) == NMSE(f) * sum(R^2) / n_cells."""
    rhs = report.nmse * report.truth_energy / report.n_cells
    return bool(np.all(np.abs(report.mse - rhs) <= tol * np.maximum(1.0, np.abs(rhs))))
