"""Command-line entry point: ``python3 -m radiomap <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import RunConfig, default_config, load_config
from .formats import read_dataset, read_observations, write_dataset, write_observations
from .kan import KanNetwork, evaluate_coarse, feature_dim, train_kan
from .metrics import compute_metrics
from .priors import assemble_prior_tensor, depth_map
from .refiner import RefinerNet, refine, train_refiner
from .render import render_map
from .scene import sample_observations

log = logging.getLogger("radiomap")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="seed (replaces the config seed list)")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    p.add_argument("--threads", type=int, help="worker processes for experiment/ablate")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, applied after --config; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radiomap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write scenes and observations (RKM1/RKO1)")
    _common(p)

    for name, helptext in (("train-kan", "fit the KAN prior on one scene"),
                           ("eval-kan", "score a KAN prior against the scene's truth")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--scene", type=Path, required=True, help="RKM1 scene file")
        p.add_argument("--obs", type=Path, help="RKO1 observations (default: sample obs_ratio)")
        if name == "eval-kan":
            p.add_argument("--kan", type=Path, required=True, help="KAN checkpoint")

    p = sub.add_parser("train-refiner", help="train the refiner on generated scenes")
    _common(p)

    p = sub.add_parser("estimate", help="end-to-end estimate for one scene")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--obs", type=Path)
    p.add_argument("--kan", type=Path, help="KAN checkpoint (default: fit on the fly)")
    p.add_argument("--refiner", type=Path, help="refiner checkpoint (default: zero-initialized)")

    p = sub.add_parser("experiment", help="sampling-ratio sweep, writes results.csv")
    _common(p)
    p = sub.add_parser("ablate", help="ablation ladder, writes ablation.csv")
    _common(p)

    p = sub.add_parser("render", help="write a band of an RKM1 map as PPM")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--band", type=int, default=0)
    p.add_argument("--overlay", action="store_true", help="draw buildings in the reserved colour")
    p.add_argument("--name", default="map.ppm", help="file name inside the output directory")

    p = sub.add_parser("selftest", help="run the built-in property checks")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    if args.out is not None:
        cfg = cfg.replace(out_dir=str(args.out))
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
    return out


def _load_inputs(cfg: RunConfig, args):
    scene, truth = read_dataset(args.scene, bench.scene_spec(cfg))
    if args.obs is not None:
        obs = read_observations(args.obs)
        if obs.shape != scene.shape or obs.n_bands != truth.n_bands:
            raise CliError("observation file does not match the scene")
    else:
        obs = sample_observations(truth, cfg.obs_ratio, bench.derive_seed(cfg.seeds[0], 6),
                                  independent_bands=cfg.independent_band_sampling,
                                  noise_sigma=cfg.noise_sigma)
    return scene, truth, obs


def _fit(cfg, scene, obs):
    return bench.fit_kan(cfg, scene, obs, bench.derive_seed(cfg.seeds[0], 3))


def _write_metrics(path: Path, report):
    lines = ["band,mse,nmse"]
    lines += [f"{f},{m:.12e},{n:.12e}" for f, (m, n) in enumerate(zip(report.mse, report.nmse))]
    lines.append(f"mean,{report.mse_mean:.12e},{report.nmse_mean:.12e}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_generate(cfg, args, out):
    counts = bench.split_counts(cfg)
    for seed in cfg.seeds:
        for s, split in enumerate(bench.SPLITS):
            for i in range(counts[split]):
                scene, truth = bench.make_scene(cfg, seed, s, i)
                stem = f"s{seed}_{split}_{i:03d}"
                write_dataset(out / f"{stem}.rkm", scene, truth)
                obs = sample_observations(
                    truth, cfg.obs_ratio,
                    bench.derive_seed(seed, 2, s, i, bench.ratio_key(cfg.obs_ratio)),
                    independent_bands=cfg.independent_band_sampling, noise_sigma=cfg.noise_sigma)
                write_observations(out / f"{stem}.rko", obs)
    print(f"wrote {sum(counts.values()) * len(cfg.seeds)} scenes to {out}")


def cmd_train_kan(cfg, args, out):
    scene, truth, obs = _load_inputs(cfg, args)
    fit = _fit(cfg, scene, obs)
    fit.net.save(out / "kan.rkck")
    coarse = evaluate_coarse(fit.net, scene)
    write_dataset(out / "coarse.rkm", scene, coarse)
    print(f"final loss {fit.final_loss:.6e}")


def cmd_eval_kan(cfg, args, out):
    scene, truth, _ = _load_inputs(cfg, args)
    net = KanNetwork.load(args.kan)
    if net.widths[0] != feature_dim(truth.n_bands):
        raise CliError("KAN input width does not match the scene's band count")
    coarse = evaluate_coarse(net, scene)
    report = compute_metrics(coarse, truth)
    _write_metrics(out / "kan_metrics.csv", report)
    print(f"nmse {report.nmse_mean:.6e} mse {report.mse_mean:.6e}")


def cmd_train_refiner(cfg, args, out):
    seed = cfg.seeds[0]
    data = bench.prepare(cfg, seed, cfg.obs_ratio, splits=("train", "val"))
    rcfg = bench.arm_config(cfg, bench.FULL_ARM)
    net = RefinerNet(rcfg, seed=bench.derive_seed(seed, 4, bench.ARMS.index(bench.FULL_ARM)))
    net, hist = train_refiner(net, bench.to_samples(rcfg, data["train"], True),
                              epochs=cfg.refiner_epochs, lr=cfg.refiner_lr, lb_coef=cfg.lb_coef,
                              seed=bench.derive_seed(seed, 5), batch_size=cfg.refiner_batch,
                              val=bench.to_samples(rcfg, data["val"], True), augment=cfg.augment)
    net.save(out / "refiner.rkck")
    lines = ["epoch,train_loss,val_mse"]
    lines += [f"{e},{t:.12e},{v:.12e}" for e, (t, v) in enumerate(zip(hist.train_loss, hist.val_mse))]
    (out / "refiner_history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    routing = ["epoch,expert,token_fraction,mean_gate"]
    routing += [f"{e},{x},{f:.12e},{g:.12e}" for e, x, f, g in hist.routing]
    (out / "routing.csv").write_text("\n".join(routing) + "\n", encoding="utf-8")
    print(f"best epoch {hist.best_epoch} val mse {min(hist.val_mse):.6e}")


def cmd_estimate(cfg, args, out):
    scene, truth, obs = _load_inputs(cfg, args)
    net = KanNetwork.load(args.kan) if args.kan else _fit(cfg, scene, obs).net
    coarse = evaluate_coarse(net, scene)
    prior = assemble_prior_tensor(coarse, obs, scene, depth_map(scene, tau_max=cfg.tau_max))
    if args.refiner:
        refiner = RefinerNet.load(args.refiner)
    else:
        refiner = RefinerNet(bench.arm_config(cfg, bench.FULL_ARM), seed=0)
    est = refine(refiner, prior, coarse)
    write_dataset(out / "coarse.rkm", scene, coarse)
    write_dataset(out / "estimate.rkm", scene, est)
    np.save(out / "estimate.npy", est.values)
    np.save(out / "coarse.npy", coarse.values)
    report = compute_metrics(est, truth)
    _write_metrics(out / "estimate_metrics.csv", report)
    print(f"nmse {report.nmse_mean:.6e} mse {report.mse_mean:.6e}")


def _write_table(out: Path, name: str, rows, cfg):
    (out / name).write_text(bench.rows_to_csv(rows), encoding="utf-8")
    (out / "metadata.txt").write_text(bench.metadata_text(cfg), encoding="utf-8")
    for r in rows:
        label = r["method"] if r["arm"] == "-" else r["arm"]
        print(f"seed {r['seed']} ratio {r['ratio']:g} {label}: nmse {r['nmse_mean']:.5f}")


def cmd_experiment(cfg, args, out):
    _write_table(out, "results.csv", bench.run_experiment(cfg), cfg)


def cmd_ablate(cfg, args, out):
    _write_table(out, "ablation.csv", bench.run_ablation(cfg), cfg)


def cmd_render(cfg, args, out):
    scene, rmap = read_dataset(args.scene, bench.scene_spec(cfg))
    render_map(rmap, args.band, out / args.name, scene.E if args.overlay else None)
    print(f"wrote {out / args.name}")


def cmd_selftest(cfg, args, out):
    from .selftest import run_all
    results = run_all()
    (out / "selftest.txt").write_text(
        "".join(f"{'PASS' if ok else 'FAIL'} {name}: {msg}\n" for name, ok, msg in results),
        encoding="utf-8")
    for name, ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {msg}")
    if not all(ok for _, ok, _ in results):
        raise CliError("selftest failed")


COMMANDS = {"generate": cmd_generate, "train-kan": cmd_train_kan, "eval-kan": cmd_eval_kan,
            "train-refiner": cmd_train_refiner, "estimate": cmd_estimate,
            "experiment": cmd_experiment, "ablate": cmd_ablate, "render": cmd_render,
            "selftest": cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        out = _prepare_out(cfg)
        COMMANDS[args.command](cfg, args, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0
