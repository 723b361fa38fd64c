"""Sampling-ratio sweep and ablation ladder on the synthetic benchmark.

All methods and arms see the same scenes and the same observation cells
(paired evaluation).  Every random draw is keyed by (seed, purpose, index).
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .baselines import idw_interpolate, ordinary_kriging
from .config import RunConfig
from .kan import KanNetwork, evaluate_coarse, feature_dim, train_kan
from .metrics import MetricReport, compute_metrics
from .priors import PriorTensor, assemble_prior_tensor, channel_names, depth_map
from .refiner import (RefinerConfig, RefinerNet, RefinerSample, config_for_channels,
                      predict_batch, select_input, train_refiner)
from .scene import (ObservationSet, PropagationParams, Radiomap, RadioScene, SceneSpec,
                    generate_scene, sample_observations, simulate_radiomap)

log = logging.getLogger(__name__)

CSV_FIELDS = ["method", "arm", "ratio", "seed", "scene_count", "nmse_mean", "nmse_std",
              "mse_mean", "mse_std", "wall_seconds"]
SPLITS = ("train", "val", "test")
ARMS = ["backbone", "backbone+kan", "backbone+moe", "backbone+moe+kan",
        "backbone+moe+kan+depth"]
FULL_ARM = ARMS[-1]


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def ratio_key(ratio: float) -> int:
    return int(round(ratio * 1_000_000))


def scene_spec(cfg: RunConfig) -> SceneSpec:
    return SceneSpec(H=cfg.grid_h, W=cfg.grid_w, cell_size_m=cfg.cell_size_m,
                     building_count=(cfg.building_count_min, cfg.building_count_max),
                     building_size=(cfg.building_size_min, cfg.building_size_max),
                     n_tx=cfg.n_tx, frequencies_hz=tuple(cfg.frequencies_hz))


def propagation(cfg: RunConfig) -> PropagationParams:
    return PropagationParams(path_loss_exponent=cfg.path_loss_exponent,
                             ref_distance_m=cfg.ref_distance_m,
                             penetration_db=cfg.penetration_db, p0_db=cfg.p0_db)


def base_refiner_config(cfg: RunConfig) -> RefinerConfig:
    return RefinerConfig(grid=(cfg.grid_h, cfg.grid_w), enc_widths=tuple(cfg.enc_widths),
                         patch=cfg.patch, token_dim=cfg.token_dim, depth=cfg.depth,
                         heads=cfg.heads, n_experts=cfg.experts, top_k=cfg.top_k,
                         expert_hidden=cfg.expert_hidden, lb_coef=cfg.lb_coef)


@dataclass
class SceneCase:
    scene: RadioScene
    truth: Radiomap
    obs: ObservationSet
    coarse: Radiomap
    prior: PriorTensor
    kan_loss: float


def make_scene(cfg: RunConfig, seed: int, split: int, index: int
               ) -> tuple[RadioScene, Radiomap]:
    scene = generate_scene(scene_spec(cfg), derive_seed(seed, 1, split, index))
    return scene, simulate_radiomap(scene, propagation(cfg))


def fit_kan(cfg: RunConfig, scene: RadioScene, obs: ObservationSet, seed: int):
    net = KanNetwork([feature_dim(scene.spec.n_bands), *cfg.kan_hidden, 1], seed=seed,
                     grid_size=cfg.kan_grid, order=cfg.kan_order)
    fit = train_kan(net, obs, scene, epochs=cfg.kan_epochs, lr=cfg.kan_lr, seed=seed,
                    spatial_lambda=cfg.kan_spatial_lambda)
    return fit


def make_case(cfg: RunConfig, seed: int, ratio: float, split: int, index: int) -> SceneCase:
    scene, truth = make_scene(cfg, seed, split, index)
    obs = sample_observations(truth, ratio, derive_seed(seed, 2, split, index, ratio_key(ratio)),
                              independent_bands=cfg.independent_band_sampling,
                              noise_sigma=cfg.noise_sigma)
    fit = fit_kan(cfg, scene, obs, derive_seed(seed, 3, split, index, ratio_key(ratio)))
    coarse = evaluate_coarse(fit.net, scene)
    prior = assemble_prior_tensor(coarse, obs, scene, depth_map(scene, tau_max=cfg.tau_max))
    return SceneCase(scene, truth, obs, coarse, prior, fit.final_loss)


def split_counts(cfg: RunConfig) -> dict[str, int]:
    return {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}


def prepare(cfg: RunConfig, seed: int, ratio: float, cache: dict | None = None,
            splits=SPLITS) -> dict[str, list[SceneCase]]:
    """Scenes, observations, KAN priors and prior tensors for each split.

    ``cache`` memoizes by (config digest, seed, ratio, split) so the sweep and the
    ablation can share the expensive per-scene KAN fits.
    """
    counts = split_counts(cfg)
    out = {}
    for s, split in enumerate(SPLITS):
        if split not in splits:
            continue
        key = (cfg.digest(), seed, ratio_key(ratio), split)
        if cache is not None and key in cache:
            out[split] = cache[key]
            continue
        cases = [make_case(cfg, seed, ratio, s, i) for i in range(counts[split])]
        if cache is not None:
            cache[key] = cases
        out[split] = cases
    return out


def _mask(cfg: RunConfig, case: SceneCase):
    return (case.scene.E == 0) if cfg.open_space_only else None


def _report(cfg, est, case, **meta) -> MetricReport:
    return compute_metrics(est, case.truth, mask=_mask(cfg, case), **meta)


# ---------------------------------------------------------------- arms


def arm_channels(arm: str, n_bands: int) -> list[str]:
    names = channel_names(n_bands)
    keep = [n for n in names if n.startswith(("obs_", "mask_")) or n in ("building", "tx")]
    if "kan" in arm.split("+"):
        keep = [n for n in names if n.startswith("coarse_")] + keep
    if "depth" in arm.split("+"):
        keep = keep + ["depth"]
    return keep


def arm_config(cfg: RunConfig, arm: str) -> RefinerConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    F = len(cfg.frequencies_hz)
    return config_for_channels(arm_channels(arm, F), F, base_refiner_config(cfg),
                               use_moe="moe" in arm.split("+"))


def arm_uses_kan(arm: str) -> bool:
    return "kan" in arm.split("+")


def to_samples(rcfg: RefinerConfig, cases: list[SceneCase], use_kan: bool
               ) -> list[RefinerSample]:
    samples = []
    for c in cases:
        base = np.moveaxis(c.coarse.values, -1, 0) if use_kan else \
            np.zeros((rcfg.n_bands,) + tuple(rcfg.grid))
        samples.append(RefinerSample(x=select_input(rcfg, c.prior), base=base,
                                     truth=np.moveaxis(c.truth.values, -1, 0)))
    return samples


def train_arm(cfg: RunConfig, arm: str, data: dict[str, list[SceneCase]], seed: int):
    rcfg = arm_config(cfg, arm)
    net = RefinerNet(rcfg, seed=derive_seed(seed, 4, ARMS.index(arm)))
    use_kan = arm_uses_kan(arm)
    net, hist = train_refiner(net, to_samples(rcfg, data["train"], use_kan),
                              epochs=cfg.refiner_epochs, lr=cfg.refiner_lr,
                              lb_coef=cfg.lb_coef, seed=derive_seed(seed, 5, ARMS.index(arm)),
                              batch_size=cfg.refiner_batch,
                              val=to_samples(rcfg, data["val"], use_kan), augment=cfg.augment)
    return net, hist


def evaluate_arm(cfg: RunConfig, net: RefinerNet, arm: str, cases: list[SceneCase]
                 ) -> list[MetricReport]:
    samples = to_samples(net.cfg, cases, arm_uses_kan(arm))
    pred = predict_batch(net, samples)
    return [_report(cfg, np.moveaxis(p, 0, -1), c, method="kmoe", arm=arm)
            for p, c in zip(pred, cases)]


def _arm_reports(cfg, arm, data, seed, ratio, cache) -> list[MetricReport]:
    # the full arm is trained identically by the sweep and the ladder
    key = ("arm", cfg.digest(), seed, ratio_key(ratio), arm)
    if cache is not None and key in cache:
        return cache[key]
    net, _ = train_arm(cfg, arm, data, seed)
    reports = evaluate_arm(cfg, net, arm, data["test"])
    if cache is not None:
        cache[key] = reports
    return reports


# ---------------------------------------------------------------- tables


def _row(method, arm, ratio, seed, reports, wall, cfg):
    nmse = np.array([r.nmse_mean for r in reports])
    mse = np.array([r.mse_mean for r in reports])
    return {"method": method, "arm": arm, "ratio": ratio, "seed": seed,
            "scene_count": len(reports), "nmse_mean": float(nmse.mean()),
            "nmse_std": float(nmse.std()), "mse_mean": float(mse.mean()),
            "mse_std": float(mse.std()),
            "wall_seconds": float(wall) if cfg.record_timing else 0.0,
            "reports": reports}


def _experiment_seed(cfg: RunConfig, seed: int, cache: dict | None) -> list[dict]:
    rows = []
    for ratio in cfg.ratios:
        needs_train = "kmoe" in cfg.methods
        data = prepare(cfg, seed, ratio, cache,
                       splits=SPLITS if needs_train else ("test",))
        test = data["test"]
        for method in cfg.methods:
            t0 = time.perf_counter()
            arm = "-"
            if method == "kan":
                reports = [_report(cfg, c.coarse, c, method=method) for c in test]
            elif method == "idw":
                reports = [_report(cfg, idw_interpolate(c.obs, power=cfg.idw_power), c,
                                   method=method) for c in test]
            elif method == "kriging":
                reports = []
                for c in test:
                    est, fell_back = ordinary_kriging(c.obs)
                    est.values = np.clip(est.values, 0.0, 1.0)
                    reports.append(_report(cfg, est, c, method=method, fallback=fell_back))
            elif method == "kmoe":
                arm = FULL_ARM
                reports = _arm_reports(cfg, arm, data, seed, ratio, cache)
            else:
                raise ValueError(f"unknown method {method!r}")
            rows.append(_row(method, arm, ratio, seed, reports, time.perf_counter() - t0, cfg))
            log.info("seed %d ratio %g %s nmse %.5f", seed, ratio, method, rows[-1]["nmse_mean"])
    return rows


def _ablation_seed(cfg: RunConfig, seed: int, cache: dict | None) -> list[dict]:
    data = prepare(cfg, seed, cfg.ablation_ratio, cache)
    rows = []
    for arm in ARMS:
        t0 = time.perf_counter()
        reports = _arm_reports(cfg, arm, data, seed, cfg.ablation_ratio, cache)
        rows.append(_row("kmoe", arm, cfg.ablation_ratio, seed, reports,
                         time.perf_counter() - t0, cfg))
        log.info("seed %d arm %s nmse %.5f", seed, arm, rows[-1]["nmse_mean"])
    return rows


def _run_seeds(fn, cfg: RunConfig, cache: dict | None) -> list[dict]:
    if cfg.threads > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(fn, [cfg] * len(cfg.seeds), cfg.seeds, [None] * len(cfg.seeds)))
    else:
        parts = [fn(cfg, seed, cache) for seed in cfg.seeds]
    return [row for part in parts for row in part]


def run_experiment(cfg: RunConfig, cache: dict | None = None) -> list[dict]:
    """One row per (seed, ratio, method)."""
    return _run_seeds(_experiment_seed, cfg, cache)


def run_ablation(cfg: RunConfig, cache: dict | None = None) -> list[dict]:
    """One row per (seed, arm), arms in ladder order."""
    return _run_seeds(_ablation_seed, cfg, cache)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([r["method"], r["arm"], repr(float(r["ratio"])), r["seed"],
                         r["scene_count"]] + [f"{r[k]:.12e}" for k in CSV_FIELDS[5:]])
    return buf.getvalue()


def metadata_text(cfg: RunConfig) -> str:
    names = channel_names(len(cfg.frequencies_hz))
    lines = [f"artifact_version = radiomap {__version__}",
             f"config_sha256 = {cfg.digest()}",
             "prior_layout_version = 1",
             "channel_order = " + ",".join(names)]
    return "\n".join(lines) + "\n"


def summarize(rows: list[dict], key: str = "method") -> dict[str, float]:
    """Mean NMSE over seeds, grouped by ``key`` (method or arm)."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        name = r[key] if key == "method" or r["arm"] != "-" else r["method"]
        groups.setdefault(name, []).append(r["nmse_mean"])
    return {k: float(np.mean(v)) for k, v in groups.items()}
