"""Fast in-process property checks bundled behind ``radiomap selftest``.

The full suite lives in the test directory; these are the cheap subsets that
run in a few seconds without pytest.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import gradcheck
from . import tensor as T
from .kan import _cox_de_boor, bspline_basis, make_knots
from .metrics import check_scale_relation, compute_metrics
from .nn import load_checkpoint, save_checkpoint
from .priors import bresenham_line, depth_counts
from .refiner import top_k_mask
from .scene import SceneSpec, generate_scene, simulate_radiomap


def _gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = [
        (lambda a, b: T.mul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        (lambda a, b: T.matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        (lambda a: T.softmax_lastdim(a), [rng.normal(size=(2, 5))]),
        (lambda a: T.silu(a), [rng.normal(size=(6,))]),
        (lambda x, w: T.conv2d_im2col(x, w, stride=2, pad=1),
         [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))]),
    ]
    for i, (fn, arrays) in enumerate(cases):
        worst = max(worst, gradcheck.check(fn, arrays, seed=i))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def _splines():
    knots = make_knots(8, 3)
    x = np.random.default_rng(1).uniform(-1, 1, 1000)
    B = bspline_basis(x, knots, 3)
    pou = float(np.abs(B.sum(axis=1) - 1).max())
    cdb = float(np.abs(B - _cox_de_boor(x, knots, 3)).max())
    return pou < 1e-12 and cdb < 1e-12, f"partition {pou:.1e}, recursion gap {cdb:.1e}"


def _depth():
    bad = 0
    for seed in range(5):
        scene = generate_scene(SceneSpec(), seed)
        t = scene.transmitters[0]
        fast = depth_counts(scene.E, t)
        for (x, y) in [(0, 0), (31, 31), (5, 20), (17, 3)]:
            slow = sum(int(scene.E[c]) for c in bresenham_line(t, (x, y)))
            bad += int(fast[x, y] != slow)
    return bad == 0, f"{bad} mismatches"


def _routing():
    p = np.random.default_rng(2).dirichlet(np.ones(4), size=10_000)
    mask = top_k_mask(p, 2)
    gates = p * mask / (p * mask).sum(axis=1, keepdims=True)
    ok = (mask.sum(axis=1) == 2).all() and np.abs(gates.sum(axis=1) - 1).max() < 1e-12
    return bool(ok), "exactly k active, gates sum to 1"


def _metrics():
    rep = compute_metrics(np.array([[[1.0], [1.0]], [[1.0], [0.0]]]), np.ones((2, 2, 1)))
    ok = rep.mse_mean == 0.25 and rep.nmse_mean == 0.25 and check_scale_relation(rep)
    return bool(ok), f"mse {rep.mse_mean}, nmse {rep.nmse_mean}"


def _formats():
    from .formats import read_dataset, write_dataset
    scene = generate_scene(SceneSpec(), 3)
    rmap = simulate_radiomap(scene)
    rmap.values = rmap.values.astype(np.float32).astype(np.float64)
    with tempfile.TemporaryDirectory() as tmp:
        write_dataset(Path(tmp) / "a.rkm", scene, rmap)
        scene2, rmap2 = read_dataset(Path(tmp) / "a.rkm")
        tensors = {"w": np.arange(6.0).reshape(2, 3) / 7}
        save_checkpoint(Path(tmp) / "a.rkck", tensors)
        back = load_checkpoint(Path(tmp) / "a.rkck")
    ok = (np.array_equal(scene.E, scene2.E) and np.array_equal(rmap.values, rmap2.values)
          and np.array_equal(back["w"], tensors["w"]))
    return bool(ok), "RKM1 and RKCK round trip"


CHECKS = [("gradients", _gradients), ("splines", _splines), ("depth", _depth),
          ("routing", _routing), ("metrics", _metrics), ("formats", _formats)]


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, msg = fn()
        except Exception as exc:  # report, keep going
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, msg))
    return results
