"""Tests for the numpy MLP: forward pass, manual gradients, serialization."""

import json

import numpy as np
import pytest


def _tiny_model():
    from fairlayer.network import MLPModel

    return MLPModel(
        weights=[np.array([[1.0, -1.0], [2.0, 0.0]]), np.array([[1.0, 1.0]])],
        biases=[np.array([0.0, -1.0]), np.array([0.5])],
    )


def _numeric_gradients(model, X, dz, step=1e-6):
    from fairlayer.network import forward

    numeric = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            saved = p[idx]
            p[idx] = saved + step
            up = dz @ forward(model, X)
            p[idx] = saved - step
            down = dz @ forward(model, X)
            p[idx] = saved
            g[idx] = (up - down) / (2 * step)
        numeric.append(g)
    return numeric


class TestForward:
    def test_hand_example(self):
        from fairlayer.network import forward

        z = forward(_tiny_model(), np.array([[1.0, 0.0], [0.0, 1.0]]))
        # row 1: relu([1, 1]) -> 2 + 0.5; row 2: relu([-1, -1]) -> 0.5
        np.testing.assert_allclose(z, [2.5, 0.5])

    def test_wrong_feature_count(self):
        from fairlayer.constraints import DimensionMismatch
        from fairlayer.network import forward

        with pytest.raises(DimensionMismatch):
            forward(_tiny_model(), np.zeros((3, 5)))

    def test_non_finite_output(self):
        from fairlayer.network import NonFiniteActivation, forward

        with pytest.raises(NonFiniteActivation):
            forward(_tiny_model(), np.array([[np.inf, 0.0]]))

    def test_layer_norm_output_shape(self):
        from fairlayer.network import forward, init_model

        model = init_model([4, 6, 6, 1], layer_norm=True, seed=2)
        assert forward(model, np.ones((7, 4))).shape == (7,)


class TestInit:
    def test_shapes_and_bounds(self):
        from fairlayer.network import init_model

        model = init_model([3, 5, 1], seed=0)
        assert model.widths == [3, 5, 1]
        assert model.weights[0].shape == (5, 3)
        assert np.all(np.abs(model.weights[0]) <= np.sqrt(6.0 / 3))
        assert not any(b.any() for b in model.biases)

    def test_seeded(self):
        from fairlayer.network import init_model

        a, b = init_model([3, 5, 1], seed=9), init_model([3, 5, 1], seed=9)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_output_width_must_be_one(self):
        from fairlayer.constraints import DimensionMismatch
        from fairlayer.network import init_model

        with pytest.raises(DimensionMismatch):
            init_model([3, 5, 2])

    def test_parameter_order_with_norm(self):
        from fairlayer.network import init_model

        model = init_model([3, 4, 1], layer_norm=True)
        shapes = [p.shape for p in model.parameters()]
        assert shapes == [(4, 3), (4,), (4,), (4,), (1, 4), (1,)]


class TestBackward:
    @pytest.mark.parametrize("layer_norm", [False, True])
    def test_matches_finite_differences(self, layer_norm):
        from fairlayer.network import backward, forward_with_cache, init_model

        model = init_model([3, 5, 4, 1], layer_norm=layer_norm, seed=11)
        rng = np.random.default_rng(4)
        # zero biases put a unit fed only by dead ReLUs exactly on the kink
        for b in model.biases:
            b[...] = rng.uniform(0.1, 0.5, size=b.shape) * rng.choice([-1.0, 1.0], size=b.shape)
        X = rng.standard_normal((6, 3))
        dz = rng.standard_normal(6)
        _, caches = forward_with_cache(model, X)
        for cache in caches[:-1]:
            assert np.min(np.abs(cache.post)) > 1e-5
        analytic = backward(model, caches, dz)
        numeric = _numeric_gradients(model, X, dz)
        assert len(analytic) == len(numeric)
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-6)


class TestSerialization:
    def test_round_trip_is_exact(self, tmp_path):
        from fairlayer.network import forward, init_model, load_model, save_model

        model = init_model([4, 3, 1], layer_norm=True, seed=5)
        path = tmp_path / "model.json"
        save_model(model, path, extra={"method": "flayer"})
        loaded = load_model(path)
        X = np.random.default_rng(0).standard_normal((5, 4))
        np.testing.assert_array_equal(forward(loaded, X), forward(model, X))
        doc = json.loads(path.read_text())
        assert doc["metadata"] == {"method": "flayer"}
        assert doc["layers"][-1]["activation"] == "linear"

    def test_unknown_version(self, tmp_path):
        from fairlayer.network import ModelFormatError, init_model, load_model, model_to_dict

        doc = model_to_dict(init_model([2, 1]))
        doc["format_version"] = 99
        path = tmp_path / "model.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_malformed_layers(self):
        from fairlayer.network import ModelFormatError, model_from_dict

        with pytest.raises(ModelFormatError):
            model_from_dict({"format_version": 1, "layers": [{"in": 2}]})
