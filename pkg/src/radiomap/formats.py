"""Binary scene/radiomap (RKM1) and observation (RKO1) files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import ObservationSet, Radiomap, RadioScene, SceneSpec

DATASET_MAGIC = b"RKM1"
DATASET_VERSION = 1
OBS_MAGIC = b"RKO1"


def dataset_bytes(scene: RadioScene, rmap: Radiomap) -> bytes:
    H, W = scene.shape
    F = rmap.n_bands
    if rmap.shape != (H, W):
        raise ValueError("radiomap and scene grids differ")
    freqs = np.asarray(scene.spec.frequencies_hz, dtype="<f8")
    if len(freqs) != F:
        raise ValueError("radiomap band count differs from scene frequencies")
    buf = bytearray(DATASET_MAGIC)
    buf += struct.pack("<H4I", DATASET_VERSION, H, W, F, len(scene.transmitters))
    buf += np.ascontiguousarray(scene.E, dtype=np.uint8).tobytes()
    for x, y in scene.transmitters:
        buf += struct.pack("<2I", x, y)
    buf += freqs.tobytes()
    buf += np.asarray(rmap.calibration, dtype="<f8").reshape(F, 2).tobytes()
    buf += np.ascontiguousarray(rmap.values, dtype="<f4").tobytes()
    return bytes(buf)


def write_dataset(path, scene: RadioScene, rmap: Radiomap):
    Path(path).write_bytes(dataset_bytes(scene, rmap))


def read_dataset(path, spec_defaults: SceneSpec = SceneSpec()) -> tuple[RadioScene, Radiomap]:
    """Fields not stored in the file (cell size, building ranges) come from ``spec_defaults``."""
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise ValueError("not an RKM1 file (bad magic)")
    version, H, W, F, n_tx = struct.unpack_from("<H4I", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported RKM1 version {version}")
    pos = 4 + struct.calcsize("<H4I")
    expected = pos + H * W + 8 * n_tx + 8 * F + 16 * F + 4 * H * W * F
    if len(data) != expected:
        raise ValueError(f"RKM1 length {len(data)} != expected {expected}")
    E = np.frombuffer(data, np.uint8, H * W, pos).reshape(H, W).copy()
    pos += H * W
    tx = np.frombuffer(data, "<u4", 2 * n_tx, pos).reshape(n_tx, 2)
    pos += 8 * n_tx
    freqs = np.frombuffer(data, "<f8", F, pos)
    pos += 8 * F
    calib = np.frombuffer(data, "<f8", 2 * F, pos).reshape(F, 2)
    pos += 16 * F
    values = np.frombuffer(data, "<f4", H * W * F, pos).reshape(H, W, F).astype(np.float64)
    spec = SceneSpec(H=H, W=W, cell_size_m=spec_defaults.cell_size_m,
                     building_count=spec_defaults.building_count,
                     building_size=spec_defaults.building_size, n_tx=n_tx,
                     frequencies_hz=tuple(float(f) for f in freqs))
    scene = RadioScene(E=E, transmitters=[(int(x), int(y)) for x, y in tx], spec=spec)
    rmap = Radiomap(values=values, calibration=[(float(a), float(b)) for a, b in calib])
    return scene, rmap


def observations_bytes(obs: ObservationSet) -> bytes:
    H, W = obs.shape
    n = len(obs.cells[0])
    if any(len(c) != n for c in obs.cells):
        raise ValueError("RKO1 needs the same observation count in every band")
    buf = bytearray(OBS_MAGIC)
    buf += struct.pack("<4I", n, obs.n_bands, H, W)
    for cells in obs.cells:
        cells = np.asarray(cells, dtype=np.int64)
        buf += (cells[:, 0] * W + cells[:, 1]).astype("<u4").tobytes()
    for values in obs.values:
        buf += np.asarray(values, dtype="<f4").tobytes()
    return bytes(buf)


def write_observations(path, obs: ObservationSet):
    Path(path).write_bytes(observations_bytes(obs))


def read_observations(path) -> ObservationSet:
    data = Path(path).read_bytes()
    if data[:4] != OBS_MAGIC:
        raise ValueError("not an RKO1 file (bad magic)")
    n, F, H, W = struct.unpack_from("<4I", data, 4)
    pos = 20
    if len(data) != pos + 8 * n * F:
        raise ValueError("RKO1 payload length mismatch")
    cells, values = [], []
    for _ in range(F):
        flat = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
        pos += 4 * n
        cells.append(np.stack([flat // W, flat % W], axis=1))
    for _ in range(F):
        values.append(np.frombuffer(data, "<f4", n, pos).astype(np.float64))
        pos += 4 * n
    return ObservationSet(cells=cells, values=values, shape=(H, W))
