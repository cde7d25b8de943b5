"""Tests for the four training methods, penalties, evaluation and lambda selection."""

import numpy as np
import pytest


def _dataset(seed=3):
    from fairlayer.datagen import ScenarioConfig, generate

    cfg = ScenarioConfig(n=400, d=6, block_size=3, n_relevant=2, beta_support=2, n_interactions=4, seed=seed)
    return generate(cfg)


def _cfg(method, **overrides):
    from fairlayer.training import TrainConfig

    params = dict(hidden=(8,), batch_size=64, max_epochs=3, seed=1)
    params.update(overrides)
    return TrainConfig.for_method(method, **params)


class TestTrainConfig:
    def test_strict_penalty_default_weight(self):
        from fairlayer.training import STRICT_PENALTY_LAMBDA, TrainConfig

        assert TrainConfig.for_method("strict-penalty").penalty_lambda == STRICT_PENALTY_LAMBDA
        assert TrainConfig.for_method("strict-penalty", penalty_lambda=7.0).penalty_lambda == 7.0

    def test_none_overrides_ignored(self):
        from fairlayer.training import TrainConfig

        assert TrainConfig.for_method("penalty", learning_rate=None).learning_rate == 0.01

    def test_inference_modes(self):
        from fairlayer.training import TrainConfig

        assert TrainConfig.for_method("flayer").inference_mode == "project"
        assert TrainConfig.for_method("projection").validation_mode == "raw"
        assert TrainConfig.for_method("penalty", box=(0.0, 1.0), penalty_lambda=1.0).inference_mode == "reparam"
        assert TrainConfig.for_method("penalty", box=(0.0, 1.0), penalty_lambda=0.0).inference_mode == "raw"
        assert TrainConfig.for_method("penalty", box=(0.0, 1.0), loss="bce").inference_mode == "raw"

    def test_strict_penalty_clips_gradients(self):
        from fairlayer.training import STRICT_PENALTY_GRAD_NORM, TrainConfig

        assert TrainConfig.for_method("strict-penalty").max_grad_norm == STRICT_PENALTY_GRAD_NORM
        assert TrainConfig.for_method("strict-penalty", max_grad_norm=2.0).max_grad_norm == 2.0
        assert TrainConfig.for_method("penalty").max_grad_norm is None
        with pytest.raises(ValueError):
            TrainConfig(max_grad_norm=0.0)

    def test_rejects_bad_values(self):
        from fairlayer.training import TrainConfig

        with pytest.raises(ValueError):
            TrainConfig(loss="hinge")
        with pytest.raises(ValueError):
            TrainConfig(box=(1.0, 1.0))
        with pytest.raises(ValueError):
            TrainConfig(method="dropout")


class TestLosses:
    def test_penalty_objective_arithmetic(self):
        from fairlayer.constraints import GroupMasks, mean_parity
        from fairlayer.training import penalty_objective

        masks = GroupMasks({"x1": np.array([0, 1])})
        y = np.array([1.0, 0.0])
        value = penalty_objective(y, y, masks, [mean_parity("x1", 0.05)], lam=2.0)
        assert value == pytest.approx(2.0)

    def test_zero_lambda_is_base_loss(self):
        from fairlayer.constraints import GroupMasks, mean_parity
        from fairlayer.training import penalty_objective

        masks = GroupMasks({"x1": np.array([0, 1, 1])})
        value = penalty_objective(np.array([1.0, 2.0, 3.0]), np.zeros(3), masks, [mean_parity("x1", 0.0)], 0.0)
        assert value == pytest.approx(14.0 / 3.0)

    def test_constant_prediction_has_no_penalty(self):
        from fairlayer.constraints import GroupMasks, mean_parity
        from fairlayer.training import penalty_terms

        masks = GroupMasks({"x1": np.array([0, 1, 0, 1])})
        value, grad = penalty_terms(np.full(4, 0.3), np.zeros(4), masks, [mean_parity("x1", 0.0)])
        assert value == pytest.approx(0.0)

    def test_quadratic_form(self):
        from fairlayer.constraints import GroupMasks, mean_parity
        from fairlayer.training import penalty_terms

        masks = GroupMasks({"x1": np.array([0, 1])})
        value, grad = penalty_terms(np.array([3.0, 1.0]), np.zeros(2), masks, [mean_parity("x1", 0.0)], "quadratic")
        assert value == pytest.approx(4.0)
        np.testing.assert_allclose(grad, [4.0, -4.0])

    def test_bce_gradient(self):
        from fairlayer.training import base_loss

        value, grad = base_loss(np.array([0.0, 0.0]), np.array([1.0, 0.0]), "bce")
        assert value == pytest.approx(np.log(2.0))
        np.testing.assert_allclose(grad, [-0.25, 0.25])

    def test_reparameterize(self):
        from fairlayer.training import reparameterize

        y, dy = reparameterize(np.array([0.0]), (0.0, 3.5))
        np.testing.assert_allclose(y, [1.75])
        np.testing.assert_allclose(dy, [3.5 / 4])


class TestBatching:
    def test_stratified_batches_cover_and_mix(self):
        from fairlayer.constraints import GroupMasks
        from fairlayer.network import philox
        from fairlayer.training import make_batches

        mask = np.zeros(100, dtype=int)
        mask[:30] = 1
        batches = make_batches(GroupMasks({"x1": mask}), 20, philox(0))
        assert len(batches) == 5
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(100))
        for idx in batches:
            assert mask[idx].sum() == 6


class TestLossAndGrad:
    def test_flayer_batches_are_feasible(self):
        from fairlayer.constraints import compile
        from fairlayer.training import build_model, loss_and_grad

        data = _dataset()
        specs = data.scenario.specs()
        train = data.part("train")
        cfg = _cfg("flayer")
        model = build_model(data.X.shape[1], cfg)
        idx = np.arange(64)
        masks = train.masks.take(idx)
        result = loss_and_grad(model, train.X[idx], train.y[idx], masks, specs, cfg)
        C = compile(specs, masks, train.y[idx], 64)
        assert C.violation(result.y_hat) <= 1e-9
        assert len(result.grads) == len(model.parameters())

    def test_infeasible_batch(self, monkeypatch):
        from fairlayer.projection import Infeasible
        from fairlayer.training import InfeasibleBatchConstraints, build_model, loss_and_grad

        def empty(*args, **kwargs):
            raise Infeasible("constraint set is empty")

        monkeypatch.setattr("fairlayer.training.project", empty)
        data = _dataset()
        train = data.part("train")
        cfg = _cfg("flayer")
        idx = np.arange(16)
        with pytest.raises(InfeasibleBatchConstraints):
            loss_and_grad(build_model(data.X.shape[1], cfg), train.X[idx], train.y[idx],
                          train.masks.take(idx), data.scenario.specs(), cfg)

    def test_gradient_through_layer(self):
        from fairlayer.checks import network_gradient_error

        assert network_gradient_error(seed=2) <= 1e-4

    def test_penalty_gradient_matches_finite_differences(self):
        from fairlayer.constraints import GroupMasks, mean_parity
        from fairlayer.network import forward, init_model
        from fairlayer.training import loss_and_grad, penalty_objective

        rng = np.random.default_rng(6)
        X = rng.standard_normal((10, 3))
        y = rng.standard_normal(10)
        masks = GroupMasks({"x1": np.array([0, 1] * 5)})
        specs = [mean_parity("x1", 0.0)]
        cfg = _cfg("penalty", penalty_lambda=0.5, penalty_form="quadratic")
        model = init_model([3, 4, 1], seed=3)
        grads = loss_and_grad(model, X, y, masks, specs, cfg).grads
        W = model.parameters()[0]
        step = 1e-6
        saved = W[0, 0]
        W[0, 0] = saved + step
        up = penalty_objective(forward(model, X), y, masks, specs, 0.5, form="quadratic")
        W[0, 0] = saved - step
        down = penalty_objective(forward(model, X), y, masks, specs, 0.5, form="quadratic")
        W[0, 0] = saved
        assert grads[0][0, 0] == pytest.approx((up - down) / (2 * step), rel=1e-4, abs=1e-7)


class TestClipGradients:
    def test_scales_to_max_norm(self):
        from fairlayer.training import clip_gradients

        grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
        clipped = clip_gradients(grads, 1.0)
        np.testing.assert_allclose(clipped[0], [0.6, 0.0])
        np.testing.assert_allclose(clipped[1], [[0.8]])

    def test_within_limit_or_disabled(self):
        from fairlayer.training import clip_gradients

        grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
        for max_norm in (None, 5.0, 10.0):
            for g, h in zip(clip_gradients(grads, max_norm), grads):
                np.testing.assert_array_equal(g, h)


class TestTrain:
    @pytest.mark.parametrize("with_box", [False, True])
    def test_zero_penalty_matches_projection_training(self, with_box):
        from fairlayer.training import build_model, train

        data = _dataset()
        specs = data.scenario.specs()
        box = data.scenario.bounds if with_box else None
        penalty_cfg = _cfg("penalty", penalty_lambda=0.0, box=box)
        projection_cfg = _cfg("projection", box=box)
        assert penalty_cfg.inference_mode == "raw"
        a, log_a = train(build_model(data.X.shape[1], penalty_cfg), data, specs, penalty_cfg)
        b, log_b = train(build_model(data.X.shape[1], projection_cfg), data, specs, projection_cfg)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)
        assert [r.val_loss for r in log_a.records] == [r.val_loss for r in log_b.records]

    def test_first_epoch_lowers_validation_loss(self):
        from fairlayer.training import build_model, evaluate, train

        data = _dataset()
        specs = data.scenario.specs()
        cfg = _cfg("projection", batch_size=16, max_epochs=1)
        before = evaluate(build_model(data.X.shape[1], cfg), data.part("val"), specs, "raw", cfg).loss
        _, history = train(build_model(data.X.shape[1], cfg), data, specs, cfg)
        assert history.records[0].val_loss < before
        assert np.isfinite(history.records[0].train_loss)

    def test_strict_penalty_narrows_gap(self):
        from fairlayer.datagen import ScenarioConfig, generate
        from fairlayer.training import build_model, evaluate, train

        # strong group bias so an unconstrained model learns a clear gap
        data = generate(ScenarioConfig(
            n=1200, d=6, block_size=3, n_relevant=2, beta_support=2, n_interactions=4, relevance=0.7, seed=3,
        ))
        specs = data.scenario.specs()
        gaps = {}
        for method, extra in (("penalty", dict(penalty_lambda=0.0)), ("strict-penalty", {})):
            cfg = _cfg(method, batch_size=32, max_epochs=8, box=data.scenario.bounds, **extra)
            model, _ = train(build_model(data.X.shape[1], cfg), data, specs, cfg)
            metrics = evaluate(model, data.part("test"), specs, cfg.inference_mode, cfg)
            gaps[method] = max(r.value for r in metrics.gaps if r.spec == "parity")
        assert gaps["strict-penalty"] < gaps["penalty"]

    def test_restores_best_epoch(self):
        from fairlayer.training import build_model, evaluate, train

        data = _dataset()
        specs = data.scenario.specs()
        cfg = _cfg("projection", max_epochs=5)
        model, history = train(build_model(data.X.shape[1], cfg), data, specs, cfg)
        assert len(history.records) == 5
        val = evaluate(model, data.part("val"), specs, "raw", cfg)
        assert val.loss == pytest.approx(history.best_val_loss)

    def test_flayer_training_runs(self):
        from fairlayer.training import build_model, evaluate, train

        data = _dataset()
        specs = data.scenario.specs()
        cfg = _cfg("flayer", max_epochs=2)
        model, history = train(build_model(data.X.shape[1], cfg), data, specs, cfg)
        assert history.method == "flayer"
        metrics = evaluate(model, data.part("test"), specs, "project", cfg)
        assert metrics.all_satisfied
        assert metrics.batch_feasible


class TestEvaluate:
    def test_constant_predictor(self):
        from fairlayer.network import MLPModel
        from fairlayer.training import evaluate

        data = _dataset()
        test = data.part("test")
        model = MLPModel([np.zeros((1, data.X.shape[1]))], [np.array([0.25])])
        metrics = evaluate(model, test, data.scenario.specs(), "raw")
        assert metrics.gaps[0].value == pytest.approx(0.0, abs=1e-12)
        assert metrics.loss == pytest.approx(np.mean((0.25 - test.y) ** 2))
        assert metrics.all_satisfied
        assert metrics.n_changed == 0

    def test_batched_projection(self):
        from fairlayer.training import build_model, evaluate

        data = _dataset()
        cfg = _cfg("flayer")
        model = build_model(data.X.shape[1], cfg)
        metrics = evaluate(model, data.part("test"), data.scenario.specs(), "project", cfg, batch_size=16)
        assert metrics.batch_feasible

    def test_unknown_mode(self):
        from fairlayer.training import build_model, evaluate

        data = _dataset()
        cfg = _cfg("projection")
        with pytest.raises(ValueError):
            evaluate(build_model(data.X.shape[1], cfg), data.part("val"), [], "sideways", cfg)


class TestSelectPenaltyLambda:
    def test_smallest_passing_weight(self):
        from fairlayer.constraints import mean_parity
        from fairlayer.training import build_model, select_penalty_lambda

        data = _dataset()
        cfg = _cfg("penalty", max_epochs=1)
        selection = select_penalty_lambda(
            lambda: build_model(data.X.shape[1], cfg), data, [mean_parity("x1", 100.0)], [1.0, 0.1], cfg,
        )
        assert selection.lam == 0.1
        assert not selection.violated
        assert [t.lam for t in selection.trials] == [0.1, 1.0]

    def test_none_passes(self):
        from fairlayer.constraints import mean_parity
        from fairlayer.training import build_model, select_penalty_lambda

        data = _dataset()
        cfg = _cfg("penalty", max_epochs=1)
        selection = select_penalty_lambda(
            lambda: build_model(data.X.shape[1], cfg), data, [mean_parity("x1", 0.0)], [0.01, 0.1], cfg,
        )
        assert selection.lam == 0.1
        assert selection.violated

    def test_empty_grid(self):
        from fairlayer.training import select_penalty_lambda

        with pytest.raises(ValueError):
            select_penalty_lambda(lambda: None, None, [], [], _cfg("penalty"))
