"""Stage-2 refiner: conv encoder, Transformer blocks with sparse MoE FFNs, skip decoder.

The decoder emits a residual map; the final estimate is
``clamp(coarse + residual, 0, 1)``.  The last 1x1 projection starts at zero,
so an untrained refiner reproduces its base map exactly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import Adam, Linear, Module, load_checkpoint, save_checkpoint
from .priors import PriorTensor, channel_names
from .scene import Radiomap
from .tensor import Tensor, parameter

log = logging.getLogger(__name__)


@dataclass
class RefinerConfig:
    d_in: int = 9
    n_bands: int = 2
    grid: tuple[int, int] = (32, 32)
    enc_widths: tuple[int, int] = (16, 32)
    patch: int = 4
    token_dim: int = 64
    depth: int = 2
    heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 128
    lb_coef: float = 0.01
    use_moe: bool = True
    ffn_hidden: int = 0  # dense-FFN width when use_moe is False; 0 = match MoE size
    pos_embed: bool = True
    channel_index: tuple[int, ...] = ()  # positions in the full prior layout

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.channel_index = tuple(int(c) for c in self.channel_index)
        if not self.channel_index:
            self.channel_index = tuple(range(self.d_in))

    def validate(self):
        h, w = self.bottleneck
        if self.grid[0] % 4 or self.grid[1] % 4:
            raise ValueError("grid must be divisible by 4 (two stride-2 stages)")
        if h % self.patch or w % self.patch:
            raise ValueError(f"bottleneck {h}x{w} not divisible by patch {self.patch}")
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("need 1 <= top_k <= n_experts")
        if len(self.channel_index) != self.d_in:
            raise ValueError("channel_index length must equal d_in")

    @property
    def bottleneck(self) -> tuple[int, int]:
        return self.grid[0] // 4, self.grid[1] // 4

    @property
    def n_tokens(self) -> int:
        h, w = self.bottleneck
        return (h // self.patch) * (w // self.patch)

    def matched_ffn_hidden(self) -> int:
        """Dense FFN width with the same parameter count as the MoE layer."""
        K, E, h = self.token_dim, self.n_experts, self.expert_hidden
        moe = E * (2 * K * h + h + K) + K * E + E
        return int(round((moe - K) / (2 * K + 1)))


# ---------------------------------------------------------------- layers


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1, zero: bool = False):
        fan_in = c_in * k * k
        bound = 0.0 if zero else np.sqrt(6.0 / fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.pad = stride, k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_im2col(x, self.weight, self.stride, self.pad, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class PatchEmbed(Module):
    """Non-overlapping PxP patches, flattened and projected to K dims, plus positions."""

    def __init__(self, channels: int, patch: int, dim: int, n_tokens: int, rng,
                 pos_embed: bool = True):
        self.patch, self.channels = patch, channels
        self.proj = Linear(channels * patch * patch, dim, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, size=(n_tokens, dim))) if pos_embed else None

    def __call__(self, x: Tensor) -> Tensor:
        B, C, h, w = x.shape
        P = self.patch
        if h % P or w % P:
            raise ValueError(f"feature map {h}x{w} not divisible by patch {P}")
        x = T.reshape(x, (B, C, h // P, P, w // P, P))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        tokens = self.proj(T.reshape(x, (B, (h // P) * (w // P), C * P * P)))
        return T.add(tokens, self.pos) if self.pos is not None else tokens


def patch_embed(features: Tensor, P: int, weight: Tensor, bias: Tensor | None = None,
                pos: Tensor | None = None) -> Tensor:
    """Functional patch embedding of one (C, h, w) map into (N, K) tokens."""
    C, h, w = features.shape
    if h % P or w % P:
        raise ValueError(f"feature map {h}x{w} not divisible by patch {P}")
    x = T.transpose(T.reshape(features, (C, h // P, P, w // P, P)), (1, 3, 0, 2, 4))
    tokens = T.matmul(T.reshape(x, ((h // P) * (w // P), C * P * P)), weight)
    if bias is not None:
        tokens = T.add(tokens, bias)
    if pos is not None:
        tokens = T.add(tokens, pos)
    return tokens


class Unpatch(Module):
    def __init__(self, channels: int, patch: int, dim: int, grid: tuple[int, int], rng):
        self.patch, self.channels, self.grid = patch, channels, grid
        self.proj = Linear(dim, channels * patch * patch, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        B = tokens.shape[0]
        P, C = self.patch, self.channels
        gh, gw = self.grid[0] // P, self.grid[1] // P
        x = T.reshape(self.proj(tokens), (B, gh, gw, C, P, P))
        x = T.transpose(x, (0, 3, 1, 4, 2, 5))
        return T.reshape(x, (B, C, gh * P, gw * P))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        B, N, K = x.shape
        h, dh = self.heads, K // self.heads

        def split(t):
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax_lastdim(scores), v)
        y = self.out(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, N, K)))
        return T.reshape(y, (N, K)) if single else y


class Expert(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(h)))


FeedForward = Expert


@dataclass
class RoutingStats:
    counts: np.ndarray  # tokens routed to each expert
    mean_gate: np.ndarray  # mean softmax probability per expert
    aux_loss: Tensor | None = None

    @property
    def token_fraction(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)


def top_k_mask(p: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(p)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def moe_forward(tokens: Tensor, router: Linear, experts: list, k: int
                ) -> tuple[Tensor, RoutingStats]:
    """Sparse mixture: each token goes to its top-k experts, gates renormalized over them."""
    shape = tokens.shape
    K = shape[-1]
    x = T.reshape(tokens, (-1, K))
    M, E = x.shape[0], len(experts)
    if not 1 <= k <= E:
        raise ValueError(f"top_k={k} outside [1, {E}]")
    p = T.softmax_lastdim(router(x))
    mask = top_k_mask(p.data, k)
    kept = T.mul(p, mask)
    gates = T.div(kept, T.tsum(kept, axis=-1, keepdims=True))
    out = None
    for e, expert in enumerate(experts):
        rows = np.nonzero(mask[:, e])[0]
        if len(rows) == 0:
            continue
        y = expert(T.take(x, rows))
        w = T.reshape(T.take(gates, (rows, np.full(len(rows), e))), (len(rows), 1))
        part = T.scatter_rows(T.mul(y, w), rows, M)
        out = part if out is None else T.add(out, part)
    counts = mask.sum(axis=0)
    mean_gate = T.mean(p, axis=0)
    fraction = counts / (M * k)
    aux = T.mul(T.tsum(T.mul(mean_gate, fraction)), float(E))
    stats = RoutingStats(counts=counts, mean_gate=mean_gate.data.copy(), aux_loss=aux)
    return T.reshape(out, shape), stats


class MoE(Module):
    def __init__(self, dim: int, n_experts: int, hidden: int, top_k: int, rng):
        self.top_k = top_k
        self.router = Linear(dim, n_experts, rng)
        self.experts = [Expert(dim, hidden, rng) for _ in range(n_experts)]

    def __call__(self, x: Tensor) -> tuple[Tensor, RoutingStats]:
        return moe_forward(x, self.router, self.experts, self.top_k)


class Block(Module):
    """H = MSA(LN(Z)) + Z;  Z' = FFN(LN(H)) + H, FFN being the MoE or a dense MLP."""

    def __init__(self, cfg: RefinerConfig, rng):
        K = cfg.token_dim
        self.ln1 = LayerNorm(K)
        self.attn = MultiHeadAttention(K, cfg.heads, rng)
        self.ln2 = LayerNorm(K)
        if cfg.use_moe:
            self.ffn = MoE(K, cfg.n_experts, cfg.expert_hidden, cfg.top_k, rng)
        else:
            self.ffn = FeedForward(K, cfg.ffn_hidden or cfg.matched_ffn_hidden(), rng)

    def __call__(self, Z: Tensor) -> tuple[Tensor, RoutingStats | None]:
        H = T.add(self.attn(self.ln1(Z)), Z)
        y = self.ffn(self.ln2(H))
        stats = None
        if isinstance(y, tuple):
            y, stats = y
        return T.add(y, H), stats


def block_forward(block: Block, Z: Tensor) -> Tensor:
    return block(Z)[0]


class RefinerNet(Module):
    def __init__(self, cfg: RefinerConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        w0, w1 = cfg.enc_widths
        self.enc0 = Conv2d(cfg.d_in, w0, 3, rng)
        self.enc1 = Conv2d(w0, w1, 3, rng, stride=2)
        self.enc2 = Conv2d(w1, w1, 3, rng, stride=2)
        self.embed = PatchEmbed(w1, cfg.patch, cfg.token_dim, cfg.n_tokens, rng, cfg.pos_embed)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.unpatch = Unpatch(w1, cfg.patch, cfg.token_dim, cfg.bottleneck, rng)
        self.dec1 = Conv2d(2 * w1, w1, 3, rng)
        self.dec0 = Conv2d(w1 + w0, w0, 3, rng)
        self.head = Conv2d(w0, cfg.n_bands, 1, rng, zero=True)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[RoutingStats]]:
        """(B, d_in, H, W) -> residual (B, F, H, W) plus per-block routing stats."""
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1] != self.cfg.d_in or x.shape[2:] != self.cfg.grid:
            raise ValueError(f"refiner expects (B, {self.cfg.d_in}, {self.cfg.grid}), got {x.shape}")
        s0 = T.relu(self.enc0(x))
        s1 = T.relu(self.enc1(s0))
        z = self.embed(T.relu(self.enc2(s1)))
        stats = []
        for block in self.blocks:
            z, st = block(z)
            if st is not None:
                stats.append(st)
        g = self.unpatch(z)
        u1 = T.relu(self.dec1(T.concat([T.upsample_nearest2x(g), s1], axis=1)))
        u0 = T.relu(self.dec0(T.concat([T.upsample_nearest2x(u1), s0], axis=1)))
        return self.head(u0), stats

    def aux_loss(self, stats: list[RoutingStats]) -> Tensor | None:
        if not stats:
            return None
        total = stats[0].aux_loss
        for st in stats[1:]:
            total = T.add(total, st.aux_loss)
        return total

    # checkpoint helpers
    def save(self, path):
        tensors = {f"refiner.{k}": v for k, v in self.state_dict().items()}
        for f in fields(self.cfg):
            tensors[f"refiner.config.{f.name}"] = np.asarray(getattr(self.cfg, f.name),
                                                             dtype=np.float64)
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "RefinerNet":
        data = load_checkpoint(path)
        kw = {}
        for f in fields(RefinerConfig):
            raw = data[f"refiner.config.{f.name}"]
            default = getattr(RefinerConfig(), f.name)
            if isinstance(default, bool):
                kw[f.name] = bool(raw)
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = tuple(int(v) for v in np.atleast_1d(raw))
        net = cls(RefinerConfig(**kw))
        prefix = "refiner."
        net.load_state_dict({k[len(prefix):]: v for k, v in data.items()
                             if k.startswith(prefix) and not k.startswith(prefix + "config.")})
        return net


def config_for_channels(names: list[str], n_bands: int, base: RefinerConfig | None = None,
                        **overrides) -> RefinerConfig:
    full = channel_names(n_bands)
    index = tuple(full.index(n) for n in names)
    kw = asdict(base) if base is not None else {}
    kw.update(overrides, d_in=len(index), n_bands=n_bands, channel_index=index)
    return RefinerConfig(**kw)


def select_input(cfg: RefinerConfig, prior: PriorTensor) -> np.ndarray:
    """(d_in, H, W) input for ``cfg`` from a full-layout prior tensor."""
    return np.moveaxis(prior.channels[..., list(cfg.channel_index)], -1, 0)


def refine(net: RefinerNet, prior: PriorTensor, coarse: Radiomap) -> Radiomap:
    """clamp(coarse + residual, 0, 1) per band."""
    x = select_input(net.cfg, prior)
    if coarse.values.shape != tuple(net.cfg.grid) + (net.cfg.n_bands,):
        raise ValueError("coarse prior shape does not match refiner config")
    with T.no_grad():
        residual, _ = net(Tensor(x[None]))
    est = coarse.values + np.moveaxis(residual.data[0], 0, -1)
    return Radiomap(values=np.clip(est, 0.0, 1.0), calibration=list(coarse.calibration))


# ---------------------------------------------------------------- training


@dataclass
class RefinerSample:
    x: np.ndarray  # (d_in, H, W)
    base: np.ndarray  # (F, H, W), the map the residual is added to
    truth: np.ndarray  # (F, H, W)


@dataclass
class RefinerHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    routing: list[tuple[int, int, float, float]] = field(default_factory=list)
    best_epoch: int = -1


def _dihedral(arr: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 square symmetries applied to the last two axes."""
    if code & 1:
        arr = arr[..., ::-1, :]
    if code & 2:
        arr = arr[..., :, ::-1]
    if code & 4:
        arr = np.swapaxes(arr, -1, -2)
    return np.ascontiguousarray(arr)


def predict_batch(net: RefinerNet, samples: list[RefinerSample]) -> np.ndarray:
    with T.no_grad():
        res, _ = net(Tensor(np.stack([s.x for s in samples])))
    base = np.stack([s.base for s in samples])
    return np.clip(base + res.data, 0.0, 1.0)


def train_refiner(net: RefinerNet, data: list[RefinerSample], epochs: int = 40,
                  lr: float = 2e-3, lb_coef: float | None = None, seed: int = 0,
                  batch_size: int = 8, val: list[RefinerSample] | None = None,
                  augment: bool = True) -> tuple[RefinerNet, RefinerHistory]:
    """Adam on mean squared error of (base + residual) plus the load-balance term.

    When ``val`` is given the parameters from the epoch with the lowest
    validation MSE are restored at the end.
    """
    if not data:
        raise ValueError("need at least one training scene")
    lb = net.cfg.lb_coef if lb_coef is None else lb_coef
    rng = np.random.default_rng(seed)
    square = net.cfg.grid[0] == net.cfg.grid[1]
    opt = Adam(net.parameters(), lr=lr)
    hist = RefinerHistory()
    best, best_state = np.inf, None
    E = net.cfg.n_experts
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        codes = rng.integers(0, 8 if square else 4, size=len(data)) if augment else \
            np.zeros(len(data), dtype=int)
        total, counts, gate_sum, n_stats = 0.0, np.zeros(E), np.zeros(E), 0
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            xb = np.stack([_dihedral(data[i].x, codes[i]) for i in idx])
            bb = np.stack([_dihedral(data[i].base, codes[i]) for i in idx])
            tb = np.stack([_dihedral(data[i].truth, codes[i]) for i in idx])
            opt.zero_grad()
            residual, stats = net(Tensor(xb))
            err = T.sub(T.add(residual, bb), tb)
            loss = T.mean(T.square(err))
            aux = net.aux_loss(stats)
            if aux is not None and lb:
                loss = T.add(loss, T.mul(aux, lb))
            if not np.isfinite(loss.data):
                raise FloatingPointError("refiner training produced a NaN loss")
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            for st in stats:
                counts += st.counts
                gate_sum += st.mean_gate
                n_stats += 1
        hist.train_loss.append(total / len(data))
        if n_stats:
            frac = counts / counts.sum()
            for e in range(E):
                hist.routing.append((epoch, e, float(frac[e]), float(gate_sum[e] / n_stats)))
        if val:
            pred = predict_batch(net, val)
            mse = float(np.mean((pred - np.stack([s.truth for s in val])) ** 2))
            hist.val_mse.append(mse)
            if mse < best:
                best, best_state, hist.best_epoch = mse, net.state_dict(), epoch
        log.debug("epoch %d loss %.6f", epoch, hist.train_loss[-1])
    if best_state is not None:
        net.load_state_dict(best_state)
    return net, hist
