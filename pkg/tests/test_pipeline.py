import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agglom.errors import ExcludedClassError, FitFailedError
from agglom.features import FeatureRanges, fit_normalizer, normalize_matrix
from agglom.ffnn import Network, Layer, Topology, init_weights
from agglom.pipeline import (
    AREA_NET_HIDDEN,
    NUMBER_NET_TOPOLOGY,
    ModelBundle,
    area_net_topology,
    classification_metrics,
    classify_count,
    measure_sample,
    one_hot,
    psd_stats,
    rational_fit,
    regress_areas,
    relative_errors,
    rule_of_thumb_bounds,
    sweep_hidden_neurons,
    sweep_sample_count,
    train_area_net,
    train_number_net,
)


def make_ranges():
    return FeatureRanges(np.zeros(13), np.ones(13))


def make_number_net(seed=0):
    return init_weights(NUMBER_NET_TOPOLOGY, np.random.default_rng(seed))


def make_area_net(k, seed=0):
    return init_weights(area_net_topology(k), np.random.default_rng(seed))


def make_bundle():
    return ModelBundle(
        make_ranges(),
        make_number_net(),
        {k: make_area_net(k) for k in range(1, 6)},
        area_scale=6500.0,
    )


class TestModelBundle:
    def test_topologies_enforced(self):
        wrong = init_weights(Topology(13, (20,), 6, "tanh", "softmax"),
                             np.random.default_rng(0))
        with pytest.raises(ValueError):
            ModelBundle(make_ranges(), wrong, {})
        wrong_area = init_weights(Topology(13, (11,), 2, "tanh", "identity"),
                                  np.random.default_rng(0))
        with pytest.raises(ValueError):
            ModelBundle(make_ranges(), None, {2: wrong_area})

    def test_paper_hidden_sizes_table(self):
        assert AREA_NET_HIDDEN == {1: 11, 2: 124, 3: 104, 4: 29, 5: 19}
        assert NUMBER_NET_TOPOLOGY.hidden == (39,)

    def test_save_load_round_trip(self, tmp_path, rng):
        bundle = make_bundle()
        bundle.save(tmp_path / "bundle")
        back = ModelBundle.load(tmp_path / "bundle")
        x = rng.random(13)
        np.testing.assert_array_equal(
            bundle.number_net.forward(x), back.number_net.forward(x)
        )
        for k in range(1, 6):
            np.testing.assert_array_equal(
                bundle.area_nets[k].forward(x), back.area_nets[k].forward(x)
            )
        assert back.area_scale == 6500.0


class TestClassifyCount:
    def test_argmax(self):
        bundle = make_bundle()
        klass, probs = classify_count(bundle, np.full(13, 0.5))
        assert klass == int(np.argmax(probs)) + 1
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_tie_breaks_to_smaller_class(self):
        # zero weights give a uniform softmax: a six-way tie resolves to 1
        net = make_number_net()
        for layer in net.layers:
            layer.weights[...] = 0.0
            layer.biases[...] = 0.0
        bundle = ModelBundle(make_ranges(), net, {})
        klass, probs = classify_count(bundle, np.full(13, 0.3))
        np.testing.assert_allclose(probs, 1.0 / 6.0)
        assert klass == 1

    def test_missing_classifier_is_state_error(self):
        bundle = ModelBundle(make_ranges(), None, {})
        with pytest.raises(RuntimeError):
            classify_count(bundle, np.zeros(13))


class TestRegressAreas:
    def test_excluded_class(self):
        with pytest.raises(ExcludedClassError):
            regress_areas(make_bundle(), np.zeros(13), 6)

    def test_invalid_class(self):
        with pytest.raises(ValueError):
            regress_areas(make_bundle(), np.zeros(13), 0)

    def test_sorted_descending_and_clamped(self, rng):
        bundle = make_bundle()
        for k in range(2, 6):
            out = regress_areas(bundle, rng.random(13), k)
            assert len(out) == k
            assert np.all(np.diff(out) <= 0)
            assert np.all(out >= 1.0)

    def test_missing_area_net_is_state_error(self):
        bundle = ModelBundle(make_ranges(), make_number_net(), {})
        with pytest.raises(RuntimeError):
            regress_areas(bundle, np.zeros(13), 2)


class TestPsdStats:
    def test_monodisperse(self):
        areas = [math.pi * 50.0**2 / 1.0] * 5  # all d = 100
        s = psd_stats([math.pi * 2500.0] * 5)
        assert s.d_g == pytest.approx(100.0, rel=1e-12)
        assert s.sigma_g == pytest.approx(1.0, abs=1e-12)

    def test_geometric_mean_of_two(self):
        # diameters 1 and 4 px
        areas = [math.pi * (d / 2.0) ** 2 for d in (1.0, 4.0)]
        s = psd_stats(areas)
        assert s.d_g == pytest.approx(2.0, rel=1e-12)

    def test_gsd_hand_value(self):
        areas = [math.pi * (d / 2.0) ** 2 for d in (1.0, 4.0)]
        s = psd_stats(areas)
        # exp of the n-1 std of {0, ln 4}
        assert s.sigma_g == pytest.approx(2.665144142690225, rel=1e-12)

    def test_single_area_sigma_one(self):
        s = psd_stats([1234.0])
        assert s.sigma_g == 1.0 and s.n == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            psd_stats([])

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            psd_stats([100.0, -5.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.5, 3.0))
    def test_scale_equivariance(self, seed, s):
        r = np.random.default_rng(seed)
        areas = r.uniform(500, 6500, 20)
        base = psd_stats(areas)
        scaled = psd_stats(areas * s * s)
        assert scaled.d_g == pytest.approx(base.d_g * s, rel=1e-12)
        assert scaled.sigma_g == pytest.approx(base.sigma_g, rel=1e-12)


class TestRelativeErrors:
    def test_zero_for_equal(self):
        s = psd_stats([1000.0, 2000.0])
        e = relative_errors(s, s)
        assert e.e_dg == 0.0 and e.e_sigma_g == 0.0

    def test_hand_values(self):
        from agglom.pipeline import PsdStats

        e = relative_errors(PsdStats(104.1, 1.515, 10), PsdStats(100.0, 1.5, 10))
        assert e.e_dg == pytest.approx(0.041, rel=1e-9)
        assert e.e_sigma_g == pytest.approx(0.01, rel=1e-9)

    def test_zero_target_rejected(self):
        from agglom.pipeline import PsdStats

        with pytest.raises(ValueError):
            relative_errors(PsdStats(1.0, 1.0, 1), PsdStats(0.0, 1.0, 1))


class TestClassificationMetrics:
    def test_all_correct(self):
        m = classification_metrics([1, 2, 3], [1, 2, 3])
        assert m.macro == 1.0 and m.micro == 1.0

    def test_macro_with_unequal_supports(self):
        # class 1 fully correct (9 samples), class 2 fully wrong (1 sample)
        pred = [1] * 9 + [1]
        true = [1] * 9 + [2]
        m = classification_metrics(pred, true)
        assert m.per_class == {1: 1.0, 2: 0.0}
        assert m.macro == pytest.approx(0.5)
        assert m.micro == pytest.approx(0.9)

    def test_random_six_class_near_chance(self):
        r = np.random.default_rng(17)
        true = np.repeat(np.arange(1, 7), 1000)
        pred = r.integers(1, 7, true.size)
        m = classification_metrics(pred, true)
        assert 0.14 <= m.macro <= 0.20

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            classification_metrics([1], [1, 2])


class TestMeasureSample:
    def _bundle_forcing_class(self, klass):
        """A classifier whose softmax always selects the given class."""
        net = make_number_net()
        for layer in net.layers:
            layer.weights[...] = 0.0
            layer.biases[...] = 0.0
        net.layers[-1].biases[klass - 1] = 25.0
        return ModelBundle(make_ranges(), net, {k: make_area_net(k) for k in range(1, 6)})

    def _disk_image(self, intensity=0.2):
        img = np.full((64, 64), 0.9)
        yy, xx = np.mgrid[0:64, 0:64]
        img[(yy - 32) ** 2 + (xx - 32) ** 2 < 15**2] = intensity
        from agglom.raster import GrayImage

        return GrayImage(img)

    def test_all_class6_excluded(self):
        bundle = self._bundle_forcing_class(6)
        result = measure_sample(bundle, [self._disk_image() for _ in range(4)])
        assert result.areas == []
        assert result.excluded == 4
        assert result.included == 0
        assert all(r["regions"][0]["excluded"] == "class6" for r in result.records)

    def test_single_particle_count_bookkeeping(self):
        bundle = self._bundle_forcing_class(1)
        n = 5
        result = measure_sample(bundle, [self._disk_image() for _ in range(n)])
        assert len(result.areas) == n
        assert result.included == n

    def test_mixed_classes_area_count(self):
        for k in (2, 3, 5):
            bundle = self._bundle_forcing_class(k)
            result = measure_sample(bundle, [self._disk_image()])
            assert len(result.areas) == k

    def test_audit_counts_sum(self):
        bundle = self._bundle_forcing_class(1)
        from agglom.raster import GrayImage

        images = [self._disk_image(), GrayImage(np.full((32, 32), 0.8))]
        result = measure_sample(bundle, images)
        assert result.included + result.excluded + result.errored == len(images)

    def test_error_recorded_and_continues(self):
        bundle = self._bundle_forcing_class(1)

        class Boom:
            pixels = None  # breaks segment()

        result = measure_sample(bundle, [Boom(), self._disk_image()])
        assert result.errored == 1
        assert len(result.areas) == 1
        assert "error" in result.records[0]


class TestTraining:
    def _synthetic_class_data(self, n_per_class=60, seed=0):
        """Linearly separable 13-d features per class."""
        r = np.random.default_rng(seed)
        xs, ys = [], []
        for klass in range(1, 7):
            center = np.zeros(13)
            center[klass % 13] = 2.0
            center[(klass * 3) % 13] = -1.5
            xs.append(center + r.normal(0, 0.15, size=(n_per_class, 13)))
            ys.extend([klass] * n_per_class)
        return np.vstack(xs), np.asarray(ys)

    def test_train_number_net_learns(self):
        x, y = self._synthetic_class_data()
        ranges, net, hist, split = train_number_net(x, y, seed=3, epochs=120, patience=None)
        xn = normalize_matrix(x[split.test], ranges)
        pred = np.argmax(net.forward(xn), axis=1) + 1
        acc = float(np.mean(pred == y[split.test]))
        assert acc > 0.9

    def test_train_area_net_learns(self):
        r = np.random.default_rng(1)
        n = 150
        x = r.random((n, 13))
        # areas linearly readable from the features
        a1 = 500 + 6000 * x[:, 0]
        a2 = 500 + 6000 * x[:, 1]
        areas = np.column_stack((a1, a2))
        ranges = fit_normalizer(x)
        net, hist, split = train_area_net(2, x, areas, ranges, seed=5,
                                          epochs=150, patience=None)
        xt = normalize_matrix(x[split.test], ranges)
        pred = net.forward(xt) * 6500.0
        want = -np.sort(-areas[split.test], axis=1)
        rel = np.abs(pred - want) / want
        assert np.median(rel) < 0.10

    def test_training_deterministic(self):
        x, y = self._synthetic_class_data(n_per_class=20)
        _, _, h1, _ = train_number_net(x, y, seed=9, epochs=15, patience=None)
        _, _, h2, _ = train_number_net(x, y, seed=9, epochs=15, patience=None)
        assert h1["train"] == h2["train"]
        assert h1["val"] == h2["val"]


class TestSweeps:
    def _data(self, n_per_class, seed=0):
        r = np.random.default_rng(seed)
        xs, ys = [], []
        for klass in range(1, 7):
            center = np.zeros(13)
            center[klass * 2 % 13] = 1.5
            xs.append(center + r.normal(0, 0.4, size=(n_per_class, 13)))
            ys.extend([klass] * n_per_class)
        return np.vstack(xs), np.asarray(ys)

    def test_sample_count_sweep_structure(self):
        x, y = self._data(40)
        rows = sweep_sample_count(x, y, [10, 40], topology=Topology(13, (5,), 6),
                                  seeds=(0, 1, 2), epochs=25)
        assert [r["count"] for r in rows] == [10, 40]
        for r in rows:
            assert r["std"] >= 0.0
            assert np.isfinite(r["mean"])

    def test_sample_count_sweep_deterministic(self):
        x, y = self._data(20)
        a = sweep_sample_count(x, y, [10], topology=Topology(13, (4,), 6),
                               seeds=(0, 1), epochs=10)
        b = sweep_sample_count(x, y, [10], topology=Topology(13, (4,), 6),
                               seeds=(0, 1), epochs=10)
        assert a == b

    def test_sample_count_insufficient_rejected(self):
        x, y = self._data(10)
        with pytest.raises(ValueError):
            sweep_sample_count(x, y, [100], seeds=(0,), epochs=5)

    def test_neuron_sweep_anchor_normalization(self):
        x, y = self._data(25)
        t = one_hot(y)
        res = sweep_hidden_neurons(x, t, [1, 3, 6], 6, "ce", "softmax",
                                   seeds=(0, 1), epochs=20)
        rows = {r["n_hidden"]: r for r in res["rows"]}
        assert rows[1]["normalized"] == 1.0
        assert res["bounds"] == {"lower": 6, "upper_exclusive": 26, "approx": 15}

    def test_neuron_sweep_requires_anchor(self):
        x, y = self._data(10)
        with pytest.raises(ValueError):
            sweep_hidden_neurons(x, one_hot(y), [5, 10], 6, "ce", "softmax",
                                 seeds=(0,), epochs=5)

    def test_rules_of_thumb(self):
        assert rule_of_thumb_bounds(13, 6) == (6, 26, 15)
        assert rule_of_thumb_bounds(13, 1) == (1, 26, 10)
        assert rule_of_thumb_bounds(13, 5) == (5, 26, 14)


class TestRationalFit:
    def eval_true(self, x, a, b, c, d, e):
        return (a * x**3 + b * x**2 + c * x + d) / (x + e)

    def test_exact_round_trip(self):
        truth = (0.001, -0.05, 0.2, 5.0, 3.0)
        xs = np.arange(1.0, 101.0)
        ys = self.eval_true(xs, *truth)
        fit = rational_fit(xs, ys)
        assert fit.residual < 1e-8
        dense = np.linspace(1, 100, 100000)
        true_argmin = dense[np.argmin(self.eval_true(dense, *truth))]
        assert abs(fit.argmin_x - true_argmin) <= 1.0

    def test_constant_data_representable(self):
        xs = np.arange(1.0, 21.0)
        ys = np.full(20, 7.5)
        fit = rational_fit(xs, ys)
        assert fit.residual < 1e-8

    def test_noisy_round_trip_argmin(self):
        truth = (0.001, -0.05, 0.2, 5.0, 3.0)
        xs = np.arange(1.0, 101.0)
        clean = self.eval_true(xs, *truth)
        r = np.random.default_rng(12)
        noisy = clean + r.normal(0, 0.02 * np.ptp(clean), xs.size)
        fit = rational_fit(xs, noisy)
        dense = np.linspace(1, 100, 100000)
        true_argmin = dense[np.argmin(self.eval_true(dense, *truth))]
        assert abs(fit.argmin_x - true_argmin) <= 2.0

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            rational_fit([1, 2, 3], [1, 2, 3])

    def test_nonpositive_xs_rejected(self):
        with pytest.raises(ValueError):
            rational_fit([0.0, 1, 2, 3, 4, 5], np.zeros(6))


class TestOneHot:
    def test_encoding(self):
        t = one_hot([1, 6, 3])
        assert t.shape == (3, 6)
        np.testing.assert_array_equal(t.sum(axis=1), np.ones(3))
        assert t[0, 0] == 1.0 and t[1, 5] == 1.0 and t[2, 2] == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            one_hot([0])
        with pytest.raises(ValueError):
            one_hot([7])
