"""Kolmogorov-Arnold network for the coarse coverage prior.

Each edge carries ``w_b * silu(x) + w_s * sum_c coef_c * B_c(x)`` with cubic
B-splines on a uniform grid over [-1, 1]; nodes sum their incoming edges.
The network is fitted pointwise on sparse observations and then evaluated at
every cell and band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Adam, Module, load_checkpoint, save_checkpoint
from .scene import ObservationSet, Radiomap, RadioScene
from .tensor import Tensor, parameter


def make_knots(grid_size: int, order: int) -> np.ndarray:
    """``grid_size + 2*order + 1`` uniform knots; the inner span is exactly [-1, 1]."""
    h = 2.0 / grid_size
    return -1.0 + h * np.arange(-order, grid_size + order + 1)


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    B = ((x[..., None] >= knots[:-1]) & (x[..., None] < knots[1:])).astype(np.float64)
    B[x >= knots[-1], -1] = 1.0  # close the last interval (only reachable when order is 0)
    xe = x[..., None]
    for p in range(1, order + 1):
        left = (xe - knots[:-p - 1]) / (knots[p:-1] - knots[:-p - 1])
        right = (knots[p + 1:] - xe) / (knots[p + 1:] - knots[1:-p])
        B = left * B[..., :-1] + right * B[..., 1:]
    return B


def _is_uniform(knots: np.ndarray) -> bool:
    steps = np.diff(knots)
    return bool(np.allclose(steps, steps[0], rtol=1e-12, atol=0.0))


def _cubic_local(x: np.ndarray, knots: np.ndarray):
    """Interval index, the 4 nonzero cubic basis values and their x-derivatives."""
    h = knots[1] - knots[0]
    n_int = len(knots) - 1
    j = np.clip(np.floor((x - knots[0]) / h).astype(np.int64), 0, n_int - 1)
    u = (x - knots[j]) / h
    v = 1.0 - u
    u2, u3 = u * u, u * u * u
    vals = np.stack([v * v * v / 6.0,
                     (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                     (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
                     u3 / 6.0], axis=-1)
    ders = np.stack([-0.5 * v * v,
                     (1.5 * u2 - 2.0 * u),
                     (-1.5 * u2 + u + 0.5),
                     0.5 * u2], axis=-1) / h
    return j, vals, ders


def _scatter_local(j: np.ndarray, local: np.ndarray, n_basis: int) -> np.ndarray:
    # basis i is nonzero on [t_i, t_{i+4}); interval j touches bases j-3 .. j,
    # stored at padded columns j .. j+3
    out = np.zeros(j.shape + (n_basis + 7,))
    idx = j[..., None] + np.arange(4)
    np.put_along_axis(out, idx, local, axis=-1)
    return out[..., 3:3 + n_basis]


def bspline_basis(x, knots: np.ndarray, order: int) -> np.ndarray:
    """B-spline basis values, shape ``x.shape + (len(knots) - order - 1,)``.

    ``x`` is clamped to [-1, 1] first. Uniform cubic grids use the closed-form
    cardinal pieces; anything else runs the Cox-de Boor recursion.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    n_basis = len(knots) - order - 1
    if order == 3 and _is_uniform(knots):
        j, vals, _ = _cubic_local(x, knots)
        return _scatter_local(j, vals, n_basis)
    return _cox_de_boor(x, knots, order)


def bspline(x: Tensor, knots: np.ndarray, order: int, uniform: bool | None = None) -> Tensor:
    """Differentiable basis expansion: (..., n) -> (..., n, n_basis)."""
    xd = x.data
    xc = np.clip(xd, -1.0, 1.0)
    n_basis = len(knots) - order - 1
    inside = (xd >= -1.0) & (xd <= 1.0)
    if uniform is None:
        uniform = _is_uniform(knots)
    if order == 3 and uniform:
        j, vals, ders = _cubic_local(xc, knots)
        B = _scatter_local(j, vals, n_basis)

        def backward(g):
            g_local = np.take_along_axis(
                np.pad(g, [(0, 0)] * (g.ndim - 1) + [(3, 4)]), (j[..., None] + np.arange(4)), -1)
            return ((g_local * ders).sum(axis=-1) * inside,)

        return T._make(B, (x,), backward)

    B = _cox_de_boor(xc, knots, order)

    def backward(g):
        if order == 0:
            return (np.zeros_like(xd),)
        lower = _cox_de_boor(xc, knots, order - 1)
        # uniform knots: dB_{i,p}/dx = (B_{i,p-1} - B_{i+1,p-1}) / h
        h = knots[1] - knots[0]
        dB = (lower[..., :-1] - lower[..., 1:]) / h
        return ((g * dB).sum(axis=-1) * inside,)

    return T._make(B, (x,), backward)


class KanLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 grid_size: int = 8, order: int = 3, coef_std: float = 0.1):
        self.n_in, self.n_out = n_in, n_out
        self.grid_size, self.order = grid_size, order
        self.knots = make_knots(grid_size, order)
        self._uniform = _is_uniform(self.knots)
        n_basis = grid_size + order
        bound = 1.0 / np.sqrt(n_in)
        self.base_weight = parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.spline_weight = parameter(np.ones((n_out, n_in)))
        self.coef = parameter(rng.normal(0.0, coef_std / np.sqrt(n_in),
                                         size=(n_out, n_in, n_basis)))

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"layer expects width {self.n_in}, got {x.shape[-1]}")
        B = x.shape[0]
        base = T.matmul(T.silu(x), T.transpose(self.base_weight))
        basis = T.reshape(bspline(x, self.knots, self.order, self._uniform), (B, self.n_in * self.n_basis))
        eff = T.mul(self.coef, T.reshape(self.spline_weight, (self.n_out, self.n_in, 1)))
        eff = T.reshape(eff, (self.n_out, self.n_in * self.n_basis))
        return T.add(base, T.matmul(basis, T.transpose(eff)))

    def edge_eval(self, j: int, i: int, x) -> np.ndarray:
        """Value of the single edge from input ``i`` to output ``j``."""
        x = np.asarray(x, dtype=np.float64)
        silu = x / (1.0 + np.exp(-x))
        spline = bspline_basis(x, self.knots, self.order) @ self.coef.data[j, i]
        return self.base_weight.data[j, i] * silu + self.spline_weight.data[j, i] * spline


class KanNetwork(Module):
    def __init__(self, widths, seed: int = 0, grid_size: int = 8, order: int = 3):
        widths = list(widths)
        if len(widths) < 2 or widths[-1] != 1:
            raise ValueError(f"KAN widths must end in 1, got {widths}")
        rng = np.random.default_rng(seed)
        self.widths = widths
        self.layers = [KanLayer(a, b, rng, grid_size, order)
                       for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def predict(self, features: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(features)).data[:, 0]

    def save(self, path):
        tensors = {f"kan.{k}": v for k, v in self.state_dict().items()}
        tensors["kan.config.widths"] = np.asarray(self.widths, dtype=np.float64)
        tensors["kan.config.grid_size"] = np.asarray(self.layers[0].grid_size, dtype=np.float64)
        tensors["kan.config.order"] = np.asarray(self.layers[0].order, dtype=np.float64)
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "KanNetwork":
        data = load_checkpoint(path)
        try:
            widths = [int(w) for w in data["kan.config.widths"]]
            net = cls(widths, grid_size=int(data["kan.config.grid_size"]),
                      order=int(data["kan.config.order"]))
        except KeyError as exc:
            raise ValueError(f"not a KAN checkpoint: missing {exc}") from None
        net.load_state_dict({k[4:]: v for k, v in data.items()
                             if k.startswith("kan.") and not k.startswith("kan.config.")})
        return net


# ---------------------------------------------------------------- features


def feature_dim(n_bands: int) -> int:
    return 2 + (n_bands + 1) + 2


def _band_embedding(freqs: np.ndarray) -> np.ndarray:
    F = len(freqs)
    lf = np.log(freqs)
    span = lf.max() - lf.min()
    scalar = 2.0 * (lf - lf.min()) / span - 1.0 if span > 0 else np.zeros(F)
    return np.concatenate([np.eye(F), scalar[:, None]], axis=1)


def _spatial_features(scene: RadioScene, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    H, W = scene.shape
    xh = 2.0 * xs / (H - 1) - 1.0
    yh = 2.0 * ys / (W - 1) - 1.0
    diag = np.hypot(H - 1, W - 1)
    d = np.min([np.hypot(xs - tx, ys - ty) for tx, ty in scene.transmitters], axis=0)
    dist = 2.0 * d / diag - 1.0
    logd = 2.0 * np.log(np.maximum(d, 1.0)) / np.log(diag) - 1.0
    return np.stack([xh, yh, dist, logd], axis=-1)


def build_feature_matrix(scene: RadioScene, cells: np.ndarray, bands) -> np.ndarray:
    """Feature rows for ``cells`` (N, 2), one block of N rows per band in ``bands``."""
    cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    sp = _spatial_features(scene, cells[:, 0], cells[:, 1])
    emb = _band_embedding(np.asarray(scene.spec.frequencies_hz, dtype=np.float64))
    rows = [np.concatenate([sp[:, :2], np.repeat(emb[f][None], len(cells), 0), sp[:, 2:]], 1)
            for f in bands]
    return np.concatenate(rows, axis=0)


def build_features(scene: RadioScene, band: int, cell) -> np.ndarray:
    """[x, y, one-hot band, log-frequency, distance-to-Tx, log-distance], all in [-1, 1]."""
    H, W = scene.shape
    if not (0 <= cell[0] < H and 0 <= cell[1] < W):
        raise IndexError(f"cell {cell} outside grid")
    return build_feature_matrix(scene, np.array([cell]), [band])[0]


def _all_cells(H: int, W: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


# ---------------------------------------------------------------- training


@dataclass
class KanFit:
    net: KanNetwork
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def second_difference_penalty(coef: Tensor) -> Tensor:
    """Sum of squared second differences along the last axis."""
    c = coef.data
    d2 = c[..., 2:] - 2.0 * c[..., 1:-1] + c[..., :-2]

    def backward(g):
        gc = np.zeros_like(c)
        gc[..., 2:] += d2
        gc[..., 1:-1] -= 2.0 * d2
        gc[..., :-2] += d2
        return (2.0 * g * gc,)

    return T._make(np.asarray((d2 * d2).sum()), (coef,), backward)


def spline_smoothness(net: KanNetwork) -> Tensor:
    total = second_difference_penalty(net.layers[0].coef)
    for layer in net.layers[1:]:
        total = T.add(total, second_difference_penalty(layer.coef))
    return total


def fit_arrays(net: KanNetwork, X: np.ndarray, y: np.ndarray, epochs: int = 300,
               lr: float = 0.02, spatial_lambda: float = 1.0) -> KanFit:
    """Full-batch Adam on sum((net(X) - y)^2) + lambda * spline smoothness."""
    Xt = Tensor(np.asarray(X, dtype=np.float64))
    yt = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    opt = Adam(net.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        opt.zero_grad()
        loss = T.tsum(T.square(T.sub(net(Xt), yt)))
        if spatial_lambda:
            loss = T.add(loss, T.mul(spline_smoothness(net), spatial_lambda))
        if not np.isfinite(loss.data):
            raise FloatingPointError("KAN training diverged")
        T.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return KanFit(net=net, losses=losses)


def train_kan(net: KanNetwork, obs: ObservationSet, scene: RadioScene, epochs: int = 300,
              lr: float = 0.02, seed: int = 0, spatial_lambda: float = 1.0) -> KanFit:
    """Fit on the observed cells of every band at once (one shared network).

    Full-batch, so the result does not depend on ``seed``; the argument is
    kept for call-site symmetry with the refiner trainer.
    """
    del seed
    feats, targets = [], []
    for f in range(obs.n_bands):
        if len(obs.cells[f]) < 1:
            raise ValueError(f"band {f} has no observations")
        feats.append(build_feature_matrix(scene, obs.cells[f], [f]))
        targets.append(np.asarray(obs.values[f], dtype=np.float64))
    return fit_arrays(net, np.concatenate(feats), np.concatenate(targets), epochs, lr,
                      spatial_lambda)


def evaluate_coarse(net: KanNetwork, scene: RadioScene, n_bands: int | None = None) -> Radiomap:
    """Dense prediction at every cell and band, clamped to [0, 1]."""
    F = scene.spec.n_bands if n_bands is None else n_bands
    H, W = scene.shape
    X = build_feature_matrix(scene, _all_cells(H, W), range(F))
    pred = net.predict(X).reshape(F, H, W).transpose(1, 2, 0)
    return Radiomap(values=np.clip(pred, 0.0, 1.0), calibration=[(0.0, 1.0)] * F)
