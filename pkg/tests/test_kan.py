import math

import numpy as np
import pytest

import gradcases
from radiomap import gradcheck
from radiomap import tensor as T
from radiomap.kan import (KanLayer, KanNetwork, bspline_basis, build_feature_matrix,
                          build_features, evaluate_coarse, feature_dim, fit_arrays, make_knots,
                          train_kan)
from radiomap.scene import RadioScene, SceneSpec, generate_scene, sample_observations, simulate_radiomap


def cox_de_boor_scalar(i, p, x, t):
    """Textbook recursion for a single basis function, 0/0 taken as 0."""
    if p == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    out = 0.0
    if t[i + p] != t[i]:
        out += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor_scalar(i, p - 1, x, t)
    if t[i + p + 1] != t[i + 1]:
        out += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor_scalar(i + 1, p - 1, x, t)
    return out


def silu(x):
    return x / (1.0 + np.exp(-x))


class TestBasis:
    def test_knot_grid(self):
        knots = make_knots(8, 3)
        assert len(knots) == 8 + 2 * 3 + 1
        np.testing.assert_allclose(np.diff(knots), 0.25, rtol=1e-12)
        assert knots[3] == -1.0 and knots[-4] == pytest.approx(1.0, abs=1e-15)

    def test_order_zero_is_indicator(self, rng):
        knots = make_knots(6, 0)
        B = bspline_basis(np.concatenate([rng.uniform(-1, 1, 200), [-1.0, 1.0]]), knots, 0)
        assert B.shape == (202, 6)
        assert np.all(B.sum(axis=1) == 1) and np.all((B == 0) | (B == 1))

    def test_partition_of_unity(self, rng):
        x = rng.uniform(-1, 1, 1000)
        for G in (3, 5, 8, 12):
            B = bspline_basis(x, make_knots(G, 3), 3)
            assert np.abs(B.sum(axis=1) - 1).max() < 1e-12
            assert B.min() >= 0

    def test_recursion_oracle_example(self):
        knots = make_knots(5, 3)
        got = bspline_basis(np.array([0.3]), knots, 3)[0]
        expect = [cox_de_boor_scalar(i, 3, 0.3, knots) for i in range(5 + 3)]
        assert np.abs(got - expect).max() < 1e-12

    def test_recursion_oracle_random(self, rng):
        for G, k in [(8, 3), (4, 2), (7, 1), (3, 3)]:
            knots = make_knots(G, k)
            x = rng.uniform(-1, 1, 50)
            got = bspline_basis(x, knots, k)
            expect = np.array([[cox_de_boor_scalar(i, k, xi, knots) for i in range(G + k)] for xi in x])
            assert np.abs(got - expect).max() < 1e-12

    def test_inputs_clamped(self):
        knots = make_knots(8, 3)
        np.testing.assert_array_equal(bspline_basis(np.array([5.0, -7.0]), knots, 3),
                                      bspline_basis(np.array([1.0, -1.0]), knots, 3))


def _layer(n_in, n_out, seed=0):
    return KanLayer(n_in, n_out, np.random.default_rng(seed), grid_size=8)


class TestEdgesAndLayers:
    def test_zero_edge(self, rng):
        layer = _layer(1, 1)
        layer.coef.data[:] = 0
        layer.base_weight.data[:] = 0
        x = rng.uniform(-1, 1, 20)
        np.testing.assert_array_equal(layer.edge_eval(0, 0, x), 0.0)

    def test_base_path_only(self, rng):
        layer = _layer(1, 1)
        layer.coef.data[:] = 0
        layer.base_weight.data[:] = 1
        x = rng.uniform(-2, 2, 20)
        np.testing.assert_allclose(layer.edge_eval(0, 0, x), silu(x), rtol=1e-15)

    def test_edge_parameter_gradients(self):
        for seed in range(5):
            layer = _layer(1, 1, seed)
            x = T.Tensor(np.random.default_rng(seed).uniform(-1, 1, (7, 1)))
            err = gradcheck.check_module(layer, lambda: T.tsum(T.square(layer(x))))
            assert err < 1e-6

    def test_zero_layer(self, rng):
        layer = _layer(3, 2)
        for p in layer.parameters():
            p.data[:] = 0
        np.testing.assert_array_equal(layer(T.Tensor(rng.uniform(-1, 1, (4, 3)))).data, 0.0)

    def test_identity_fit(self):
        layer = _layer(1, 1)
        grid = np.linspace(-1, 1, 200)
        coef, *_ = np.linalg.lstsq(bspline_basis(grid, layer.knots, 3), grid, rcond=None)
        layer.coef.data[0, 0] = coef
        layer.base_weight.data[:] = 0
        layer.spline_weight.data[:] = 1
        x = np.linspace(-1, 1, 37)[:, None]
        # cubic splines reproduce linear functions exactly
        np.testing.assert_allclose(layer(T.Tensor(x)).data[:, 0], x[:, 0], atol=1e-10)

    def test_sum_of_two_fitted_quadratics(self, rng):
        layer = _layer(2, 1)
        grid = np.linspace(-1, 1, 200)
        B = bspline_basis(grid, layer.knots, 3)
        targets = [grid ** 2, 0.5 * grid ** 2 - grid]
        for i, tgt in enumerate(targets):
            layer.coef.data[0, i] = np.linalg.lstsq(B, tgt, rcond=None)[0]
        layer.base_weight.data[:] = 0
        layer.spline_weight.data[:] = 1
        x = rng.uniform(-1, 1, (25, 2))
        oracle = sum(bspline_basis(x[:, i], layer.knots, 3) @ layer.coef.data[0, i] for i in range(2))
        assert np.abs(layer(T.Tensor(x)).data[:, 0] - oracle).max() < 1e-10
        np.testing.assert_allclose(oracle, x[:, 0] ** 2 + 0.5 * x[:, 1] ** 2 - x[:, 1], atol=1e-10)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            _layer(3, 2)(T.Tensor(np.zeros((2, 4))))

    def test_network_shape_rules(self):
        with pytest.raises(ValueError):
            KanNetwork([4, 8, 2])
        net = KanNetwork([7, 16, 16, 1])
        assert [(l.n_in, l.n_out) for l in net.layers] == [(7, 16), (16, 16), (16, 1)]
        assert sum(l.base_weight.size for l in net.layers) == 7 * 16 + 16 * 16 + 16

    def test_network_gradients_4_8_1(self):
        for seed in range(3):
            net = KanNetwork([4, 8, 1], seed=seed)
            x = T.Tensor(np.random.default_rng(seed).uniform(-1, 1, (5, 4)))
            assert gradcheck.check_module(net, lambda: T.tsum(T.square(net(x))), n_coords=150,
                                          seed=seed) < 1e-5

    def test_composite_gradients(self):
        for seed in range(20):
            net, loss = gradcases.kan_instance(seed)
            assert gradcheck.check_module(net, loss) < 1e-5

    def test_checkpoint_round_trip(self, tmp_path):
        net = KanNetwork([5, 6, 1], seed=3, grid_size=5)
        net.save(tmp_path / "k.rkck")
        back = KanNetwork.load(tmp_path / "k.rkck")
        assert back.widths == [5, 6, 1] and back.layers[0].grid_size == 5
        for (n1, a), (n2, b) in zip(net.named_parameters(), back.named_parameters()):
            assert n1 == n2 and a.data.tobytes() == b.data.tobytes()


class TestFeatures:
    def _scene(self, tx=(0, 0), freqs=(2.4e9, 3.65e9)):
        return RadioScene(np.zeros((32, 32), np.uint8), [tx], SceneSpec(frequencies_hz=freqs))

    def test_dimension_and_range(self):
        scene = generate_scene(SceneSpec(n_tx=2), 0)
        cells = np.argwhere(np.ones((32, 32)))
        X = build_feature_matrix(scene, cells, [0, 1])
        assert X.shape == (2 * 1024, feature_dim(2)) and feature_dim(2) == 7
        assert X.min() >= -1 and X.max() <= 1

    def test_distance_endpoints(self):
        scene = self._scene(tx=(0, 0))
        assert build_features(scene, 0, (0, 0))[5] == -1.0
        assert build_features(scene, 0, (31, 31))[5] == 1.0
        assert build_features(scene, 0, (31, 31))[6] == pytest.approx(1.0, abs=1e-15)

    def test_band_embedding(self):
        f0, f1 = 2.4e9, 3.65e9
        scene = self._scene(freqs=(f0, f1))
        v = build_features(scene, 1, (10, 3))
        assert list(v[2:4]) == [0.0, 1.0]
        scalar = 2 * (math.log(f1) - math.log(f0)) / (math.log(f1) - math.log(f0)) - 1
        assert v[4] == pytest.approx(scalar, abs=1e-15)
        assert build_features(scene, 0, (10, 3))[4] == pytest.approx(-1.0, abs=1e-15)

    def test_coordinates(self):
        v = build_features(self._scene(), 0, (0, 31))
        assert v[0] == -1.0 and v[1] == 1.0

    def test_nearest_transmitter(self):
        spec = SceneSpec(n_tx=2)
        scene = RadioScene(np.zeros((32, 32), np.uint8), [(0, 0), (31, 31)], spec)
        a = build_features(scene, 0, (30, 30))
        b = build_features(RadioScene(scene.E, [(31, 31)], spec), 0, (30, 30))
        np.testing.assert_array_equal(a, b)

    def test_out_of_grid(self):
        with pytest.raises(IndexError):
            build_features(self._scene(), 0, (32, 0))


class TestTraining:
    def _problem(self, seed=0):
        scene = generate_scene(SceneSpec(), seed)
        truth = simulate_radiomap(scene)
        return scene, truth, sample_observations(truth, 0.05, seed)

    def test_zero_epochs_is_noop(self):
        scene, _, obs = self._problem()
        net = KanNetwork([7, 16, 16, 1], seed=1)
        before = net.state_dict()
        train_kan(net, obs, scene, epochs=0)
        after = net.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_sine_fit(self):
        x = np.linspace(-1, 1, 64)[:, None]
        net = KanNetwork([1, 8, 1], seed=0)
        fit_arrays(net, x, np.sin(np.pi * x[:, 0]), epochs=2000, lr=0.01, spatial_lambda=0.0)
        xt = np.linspace(-1, 1, 401)[:, None]
        rmse = np.sqrt(np.mean((net.predict(xt) - np.sin(np.pi * xt[:, 0])) ** 2))
        assert rmse < 0.02

    def test_deterministic(self):
        scene, _, obs = self._problem(2)
        a = train_kan(KanNetwork([7, 16, 16, 1], seed=4), obs, scene, epochs=30)
        b = train_kan(KanNetwork([7, 16, 16, 1], seed=4), obs, scene, epochs=30)
        assert a.losses == b.losses

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_halfway_monotone(self, seed):
        scene, _, obs = self._problem(seed)
        fit = train_kan(KanNetwork([7, 16, 16, 1], seed=seed), obs, scene)
        assert fit.losses[-1] <= fit.losses[len(fit.losses) // 2 - 1]

    def test_divergence_reported(self):
        scene, _, obs = self._problem()
        obs.values[0][0] = np.nan
        with pytest.raises(FloatingPointError):
            train_kan(KanNetwork([7, 16, 16, 1], seed=0), obs, scene, epochs=5)

    def test_empty_band_rejected(self):
        scene, _, obs = self._problem()
        obs.cells[1] = obs.cells[1][:0]
        obs.values[1] = obs.values[1][:0]
        with pytest.raises(ValueError):
            train_kan(KanNetwork([7, 16, 16, 1]), obs, scene, epochs=1)


class TestEvaluateCoarse:
    def test_zero_network(self):
        net = KanNetwork([7, 4, 1])
        for p in net.parameters():
            p.data[:] = 0
        coarse = evaluate_coarse(net, generate_scene(SceneSpec(), 0))
        assert coarse.values.shape == (32, 32, 2) and not coarse.values.any()

    def test_pure_and_pointwise(self):
        scene = generate_scene(SceneSpec(), 1)
        net = KanNetwork([7, 16, 16, 1], seed=2)
        a, b = evaluate_coarse(net, scene), evaluate_coarse(net, scene)
        assert a.values.tobytes() == b.values.tobytes()
        for (x, y, f) in [(0, 0, 0), (5, 17, 1), (31, 2, 0), (13, 13, 1)]:
            single = np.clip(net.predict(build_features(scene, f, (x, y))[None])[0], 0, 1)
            assert abs(a.values[x, y, f] - single) < 1e-12
        assert a.values.min() >= 0 and a.values.max() <= 1
