"""Binary PPM (P6) rendering of a radiomap band with a fixed colormap."""

from __future__ import annotations

import numpy as np

from .scene import Radiomap

# Reserved overlay colour for building cells; not produced by the colormap.
BUILDING_RGB = (255, 255, 255)


def _build_colormap() -> np.ndarray:
    """256 RGB entries interpolated through dark blue, cyan, yellow and red.

    Entry i represents the value i / 255.  The table is fixed so images from
    different runs are directly comparable.
    """
    anchors = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    rgb = np.array([[0, 0, 96], [0, 200, 220], [240, 230, 40], [200, 0, 0]], dtype=np.float64)
    t = np.arange(256) / 255.0
    cmap = np.stack([np.interp(t, anchors, rgb[:, c]) for c in range(3)], axis=1)
    return np.round(cmap).astype(np.uint8)


COLORMAP = _build_colormap()


def colormap_index(values: np.ndarray) -> np.ndarray:
    """floor(v * 255 + 0.5) after clipping to [0, 1]; NaN maps to 0."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0)
    return np.floor(np.clip(v, 0.0, 1.0) * 255 + 0.5).astype(np.intp)


def render_rgb(rmap: Radiomap, band: int, buildings: np.ndarray | None = None) -> np.ndarray:
    if not 0 <= band < rmap.n_bands:
        raise ValueError(f"band {band} out of range for {rmap.n_bands} bands")
    img = COLORMAP[colormap_index(rmap.values[..., band])]
    if buildings is not None:
        img[np.asarray(buildings).astype(bool)] = BUILDING_RGB
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    H, W, _ = img.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes()


def render_map(rmap: Radiomap, band: int, path, buildings: np.ndarray | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(render_rgb(rmap, band, buildings)))


def _tokens(data: bytes):
    """Yield (token, end offset) for a PPM header, skipping # comments."""
    pos = 0
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        yield data[start:pos], pos


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a P6 image with maxval 255 into (H, W, 3) uint8."""
    toks = _tokens(data)
    magic, _ = next(toks)
    if magic != b"P6":
        raise ValueError(f"not a P6 file: {magic!r}")
    W = int(next(toks)[0])
    H = int(next(toks)[0])
    maxval, end = next(toks)
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    body = data[end + 1:]
    if len(body) != H * W * 3:
        raise ValueError(f"expected {H * W * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3)
