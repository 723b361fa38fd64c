"""Knowledge-guided prior channels: building, transmitter and radio-depth maps.

Cells are ``(x, y)`` pairs indexing rasters as ``raster[x, y]`` with
``0 <= x < H`` and ``0 <= y < W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAU_MAX = 150
PRIOR_LAYOUT_VERSION = 1


def _check_cell(cell, shape):
    x, y = cell
    if not (0 <= x < shape[0] and 0 <= y < shape[1]):
        raise IndexError(f"cell {tuple(cell)} outside grid {shape}")


def bresenham_line(a, b, shape=None) -> list[tuple[int, int]]:
    """Integer Bresenham segment between two cells, endpoints included.

    The segment is always traced from the lexicographically smaller endpoint,
    so ``bresenham_line(a, b)`` and ``bresenham_line(b, a)`` give the same cells.
    """
    a, b = (int(a[0]), int(a[1])), (int(b[0]), int(b[1]))
    if shape is not None:
        _check_cell(a, shape)
        _check_cell(b, shape)
    if b < a:
        a, b = b, a
    x0, y0 = a
    x1, y1 = b
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    cells = []
    while True:
        cells.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return cells
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def depth_counts(E: np.ndarray, t) -> np.ndarray:
    """Building cells crossed by the canonical segment from every cell to ``t``.

    All H*W segments are stepped in lockstep; each step advances the major axis,
    so the loop runs at most ``max(H, W)`` times.
    """
    H, W = E.shape
    _check_cell(t, E.shape)
    gx, gy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    tx = np.full_like(gx, int(t[0]))
    ty = np.full_like(gy, int(t[1]))
    swap = (tx < gx) | ((tx == gx) & (ty < gy))
    x0 = np.where(swap, tx, gx)
    y0 = np.where(swap, ty, gy)
    x1 = np.where(swap, gx, tx)
    y1 = np.where(swap, gy, ty)
    dx, dy = np.abs(x1 - x0), -np.abs(y1 - y0)
    sx = np.where(x0 < x1, 1, -1)
    sy = np.where(y0 < y1, 1, -1)
    err = dx + dy
    occ = E.astype(np.int64)
    acc = np.zeros(H * W, dtype=np.int64)
    active = np.ones(H * W, dtype=bool)
    while True:
        acc[active] += occ[x0[active], y0[active]]
        active &= ~((x0 == x1) & (y0 == y1))
        if not active.any():
            break
        e2 = 2 * err
        step_x = active & (e2 >= dy)
        step_y = active & (e2 <= dx)
        err = err + np.where(step_x, dy, 0) + np.where(step_y, dx, 0)
        x0 = x0 + np.where(step_x, sx, 0)
        y0 = y0 + np.where(step_y, sy, 0)
    return acc.reshape(H, W)


@dataclass
class DepthMap:
    raw: np.ndarray
    normalized: np.ndarray
    tau_max: int


def normalize_depth(raw: np.ndarray, tau_max: int = TAU_MAX) -> np.ndarray:
    if tau_max <= 0:
        raise ValueError("tau_max must be positive")
    return np.minimum(1.0, raw / float(tau_max))


def depth_map(scene, t=None, tau_max: int = TAU_MAX) -> DepthMap:
    """Radio depth map towards ``t``, or the per-cell minimum over all transmitters."""
    targets = scene.transmitters if t is None else [t]
    raw = np.min([depth_counts(scene.E, tt) for tt in targets], axis=0)
    return DepthMap(raw=raw, normalized=normalize_depth(raw, tau_max), tau_max=tau_max)


def tx_map(scene) -> np.ndarray:
    T = np.zeros(scene.E.shape)
    for x, y in scene.transmitters:
        T[x, y] += 1.0
    return np.minimum(1.0, T)


def observation_raster(obs, band: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-filled value raster S_f and 0/1 mask M_f for one band."""
    H, W = obs.shape
    cells = np.asarray(obs.cells[band], dtype=np.int64).reshape(-1, 2)
    values = np.asarray(obs.values[band], dtype=np.float64)
    if len(cells) == 0:
        raise ValueError("observation set is empty")
    if np.any(cells < 0) or np.any(cells[:, 0] >= H) or np.any(cells[:, 1] >= W):
        raise IndexError("observation outside grid")
    flat = cells[:, 0] * W + cells[:, 1]
    if len(np.unique(flat)) != len(flat):
        raise ValueError("duplicate observation cells")
    S = np.zeros((H, W))
    M = np.zeros((H, W))
    S[cells[:, 0], cells[:, 1]] = values
    M[cells[:, 0], cells[:, 1]] = 1.0
    return S, M


def channel_names(n_bands: int) -> list[str]:
    """Fixed channel order of the prior tensor (layout version 1)."""
    return ([f"coarse_{f}" for f in range(n_bands)]
            + [f"obs_{f}" for f in range(n_bands)]
            + [f"mask_{f}" for f in range(n_bands)]
            + ["building", "tx", "depth"])


@dataclass
class PriorTensor:
    channels: np.ndarray  # (H, W, d_in)
    names: list[str]

    @property
    def d_in(self) -> int:
        return self.channels.shape[-1]

    @property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def channel(self, name: str) -> np.ndarray:
        return self.channels[..., self.index[name]]

    def select(self, names) -> np.ndarray:
        """Channels-first (C, H, W) stack of the named channels."""
        idx = self.index
        return np.stack([self.channels[..., idx[n]] for n in names], axis=0)

    def disassemble(self) -> dict[str, np.ndarray]:
        return {n: self.channels[..., i].copy() for i, n in enumerate(self.names)}


def assemble_prior_tensor(coarse, obs, scene, depth: DepthMap) -> PriorTensor:
    values = coarse.values
    H, W, F = values.shape
    if scene.E.shape != (H, W) or obs.shape != (H, W) or depth.normalized.shape != (H, W):
        raise ValueError("prior rasters disagree on grid shape")
    if obs.n_bands != F:
        raise ValueError(f"coarse prior has {F} bands, observations have {obs.n_bands}")
    rasters = [observation_raster(obs, f) for f in range(F)]
    stack = ([values[..., f] for f in range(F)]
             + [s for s, _ in rasters]
             + [m for _, m in rasters]
             + [scene.E.astype(np.float64), tx_map(scene), depth.normalized])
    return PriorTensor(channels=np.stack(stack, axis=-1), names=channel_names(F))
