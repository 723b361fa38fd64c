"""Synthetic urban scenes and log-distance + penetration-loss radiomaps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .priors import depth_counts


@dataclass(frozen=True)
class SceneSpec:
    H: int = 32
    W: int = 32
    cell_size_m: float = 4.0
    building_count: tuple[int, int] = (2, 6)
    building_size: tuple[int, int] = (3, 8)
    n_tx: int = 1
    frequencies_hz: tuple[float, ...] = (2.4e9, 3.65e9)

    def validate(self):
        if self.H < 16 or self.W < 16:
            raise ValueError("grid must be at least 16x16")
        lo, hi = self.building_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad building_count range {self.building_count}")
        smin, smax = self.building_size
        if not 1 <= smin <= smax <= min(self.H, self.W):
            raise ValueError(f"bad building_size range {self.building_size}")
        if self.n_tx < 1:
            raise ValueError("need at least one transmitter")
        if len(self.frequencies_hz) < 1 or min(self.frequencies_hz) <= 0:
            raise ValueError("need at least one positive frequency")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")

    @property
    def n_bands(self) -> int:
        return len(self.frequencies_hz)


@dataclass(frozen=True)
class PropagationParams:
    path_loss_exponent: float = 3.0
    ref_distance_m: float = 4.0
    penetration_db: float = 2.5
    p0_db: float = -30.0
    dynamic_range_db: float = 120.0


@dataclass
class RadioScene:
    E: np.ndarray  # (H, W) uint8 building occupancy
    transmitters: list[tuple[int, int]]
    spec: SceneSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.E.shape


@dataclass
class Radiomap:
    values: np.ndarray  # (H, W, F) in [0, 1]
    calibration: list[tuple[float, float]] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def n_bands(self) -> int:
        return self.values.shape[2]

    def to_db(self) -> np.ndarray:
        lo = np.array([c[0] for c in self.calibration])
        hi = np.array([c[1] for c in self.calibration])
        return lo + self.values * (hi - lo)


@dataclass
class ObservationSet:
    cells: list[np.ndarray]  # per band, (N, 2) int
    values: list[np.ndarray]  # per band, (N,)
    shape: tuple[int, int]

    @property
    def n_bands(self) -> int:
        return len(self.cells)

    @property
    def ratio(self) -> float:
        return len(self.cells[0]) / float(self.shape[0] * self.shape[1])


def generate_scene(spec: SceneSpec, seed: int) -> RadioScene:
    """Random axis-aligned buildings (union of rectangles) plus open-cell transmitters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    E = np.zeros((spec.H, spec.W), dtype=np.uint8)
    lo, hi = spec.building_count
    smin, smax = spec.building_size
    for _ in range(int(rng.integers(lo, hi + 1))):
        h = int(rng.integers(smin, smax + 1))
        w = int(rng.integers(smin, smax + 1))
        x0 = int(rng.integers(0, spec.H - h + 1))
        y0 = int(rng.integers(0, spec.W - w + 1))
        E[x0:x0 + h, y0:y0 + w] = 1
    open_cells = np.argwhere(E == 0)
    if len(open_cells) < spec.n_tx:
        raise ValueError("no open cell available for the transmitter")
    pick = rng.choice(len(open_cells), size=spec.n_tx, replace=False)
    transmitters = [(int(open_cells[i][0]), int(open_cells[i][1])) for i in pick]
    return RadioScene(E=E, transmitters=transmitters, spec=spec)


def received_power_db(scene: RadioScene, params: PropagationParams = PropagationParams(),
                      depth_override: np.ndarray | None = None) -> np.ndarray:
    """Unclipped received power in dB, shape (H, W, F); max over transmitters.

    ``depth_override`` replaces the per-transmitter building-crossing counts
    (mainly for isolating the penetration term).
    """
    spec = scene.spec
    H, W = scene.shape
    freqs = np.asarray(spec.frequencies_hz, dtype=np.float64)
    f_ref = freqs.min()
    band_loss = 20.0 * np.log10(freqs / f_ref)
    gx, gy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    best = np.full((H, W), -np.inf)
    d0 = params.ref_distance_m
    for tx, ty in scene.transmitters:
        d = spec.cell_size_m * np.hypot(gx - tx, gy - ty)
        D = depth_counts(scene.E, (tx, ty)) if depth_override is None else depth_override
        p = (params.p0_db - 10.0 * params.path_loss_exponent * np.log10(np.maximum(d, d0) / d0)
             - params.penetration_db * D)
        best = np.maximum(best, p)
    return best[..., None] - band_loss[None, None, :]


def simulate_radiomap(scene: RadioScene, params: PropagationParams = PropagationParams()
                      ) -> Radiomap:
    """Clip to the dynamic range, then min-max normalize each band to [0, 1]."""
    p_db = np.clip(received_power_db(scene, params),
                   params.p0_db - params.dynamic_range_db, params.p0_db)
    values = np.empty_like(p_db)
    calibration = []
    for f in range(p_db.shape[2]):
        lo, hi = float(p_db[..., f].min()), float(p_db[..., f].max())
        if not lo < hi:
            raise ValueError(f"band {f} is constant; cannot normalize")
        values[..., f] = (p_db[..., f] - lo) / (hi - lo)
        calibration.append((lo, hi))
    return Radiomap(values=values, calibration=calibration)


def observation_count(ratio: float, H: int, W: int) -> int:
    if not 0.0 < ratio <= 0.25:
        raise ValueError(f"sampling ratio {ratio} outside (0, 0.25]")
    return max(1, int(np.floor(ratio * H * W + 0.5)))


def sample_observations(rmap: Radiomap, ratio: float, seed: int,
                        independent_bands: bool = False,
                        noise_sigma: float = 0.0) -> ObservationSet:
    """Uniform cells without replacement; shared by all bands unless ``independent_bands``."""
    H, W = rmap.shape
    n = observation_count(ratio, H, W)
    rng = np.random.default_rng(seed)
    cells, values = [], []
    flat = None
    for f in range(rmap.n_bands):
        if flat is None or independent_bands:
            flat = np.sort(rng.choice(H * W, size=n, replace=False))
        xy = np.stack([flat // W, flat % W], axis=1)
        v = rmap.values[xy[:, 0], xy[:, 1], f].copy()
        if noise_sigma > 0:
            v = np.clip(v + rng.normal(0.0, noise_sigma, size=n), 0.0, 1.0)
        cells.append(xy)
        values.append(v)
    return ObservationSet(cells=cells, values=values, shape=(H, W))
