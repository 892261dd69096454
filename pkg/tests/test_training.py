import csv
import math

import numpy as np
import pytest

import ibcsc.training as training
from ibcsc.data import LabeledDataset
from ibcsc.loss import (cross_entropy, cross_entropy_grad, ib_loss, lambda_penalty, lambda_penalty_grad,
                        project_lambda)
from ibcsc.network import build_network
from ibcsc.tensor_ops import lipschitz_estimate
from ibcsc.training import DivergenceError, TrainConfig, cosine_lr, evaluate, is_lambda, sgd_step, train
from oracles import central_diff, rel_err


def tiny_data(n=10, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.standard_normal((n, 1, 8, 8)), rng.integers(0, classes, n), classes)


def toy(lam=1e-3, seed=0, kind="csc"):
    return build_network("toy", in_channels=1, spatial=(8, 8), num_classes=2, lam_init=lam, seed=seed,
                         layer_kind=kind)


class TestLoss:
    def test_hand_example(self):
        logits = np.array([[0.0, math.log(math.e - 1.0)]])  # softmax(class 0) = 1/e
        assert cross_entropy(logits, [0]) == pytest.approx(1.0, abs=1e-14)
        assert ib_loss(logits, [0], [0.3, 0.4], 0.001) == pytest.approx(0.9995, abs=1e-14)

    def test_beta_zero_is_cross_entropy(self):
        logits = np.random.default_rng(0).standard_normal((5, 3))
        assert ib_loss(logits, [0, 1, 2, 0, 1], [0.2, 0.7], 0.0) == cross_entropy(logits, [0, 1, 2, 0, 1])

    def test_zero_lambda(self):
        logits = np.random.default_rng(1).standard_normal((4, 2))
        assert ib_loss(logits, [0, 1, 1, 0], [0.0, 0.0, 0.0], 0.5) == cross_entropy(logits, [0, 1, 1, 0])

    def test_squared_variant(self):
        logits = np.zeros((1, 2))
        assert ib_loss(logits, [0], [0.3, 0.4], 0.1, squared=True) == pytest.approx(math.log(2) - 0.1 * 0.25)

    @pytest.mark.parametrize("args", [dict(beta=-0.1, lam=[0.1]), dict(beta=0.1, lam=[-0.1])])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            ib_loss(np.zeros((1, 2)), [0], args["lam"], args["beta"])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            ib_loss(np.zeros((0, 3)), [], [0.1], 0.001)

    def test_cross_entropy_gradient(self):
        logits = np.random.default_rng(2).standard_normal((4, 3))
        labels = [2, 0, 1, 1]
        num = central_diff(lambda: cross_entropy(logits, labels), logits)
        assert rel_err(cross_entropy_grad(logits, labels), num) <= 1e-8

    def test_penalty_gradient(self):
        lam = np.array([0.3, 0.1, 0.5])
        assert lambda_penalty(lam) == pytest.approx(np.sqrt(0.35))
        np.testing.assert_allclose(lambda_penalty_grad(lam), lam / np.sqrt(0.35))
        np.testing.assert_allclose(lambda_penalty_grad(lam, squared=True), 2 * lam)
        np.testing.assert_array_equal(lambda_penalty_grad(np.zeros(3)), 0.0)

    def test_stable_for_large_logits(self):
        assert cross_entropy(np.array([[1000.0, 0.0]]), [0]) == pytest.approx(0.0, abs=1e-300)


class TestProjection:
    def test_example(self):
        np.testing.assert_array_equal(project_lambda([-0.1, 0.2]), [0.0, 0.2])

    def test_feasible_unchanged(self):
        v = np.array([0.0, 0.3, 2.0])
        np.testing.assert_array_equal(project_lambda(v), v)

    def test_idempotent(self):
        v = np.random.default_rng(3).standard_normal(50)
        np.testing.assert_array_equal(project_lambda(project_lambda(v)), project_lambda(v))


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 280, 0.1) == 0.1
        assert cosine_lr(280, 280, 0.1) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(140, 280, 0.1) == pytest.approx(0.05, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)


class TestSgd:
    def test_zero_lr(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.array([5.0, 5.0])}, {}, 0.0, weight_decay=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_plain_gradient_descent(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.array([0.5, 1.0])}, {}, 0.1, momentum=0.0, nesterov=False)
        np.testing.assert_allclose(p["w"], [0.95, -2.1], rtol=0, atol=1e-15)

    def test_nesterov_scalar_recurrence(self):
        # f(w) = w^2 / 2 from w = 1; lr 0.1, momentum 0.9, scripted separately
        expect = [0.81, 0.5751]
        p, vel, got = {"w": np.array([1.0])}, {}, []
        for _ in range(2):
            sgd_step(p, {"w": p["w"].copy()}, vel, 0.1, 0.9, nesterov=True)
            got.append(p["w"][0])
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)

    def test_heavy_ball(self):
        p, vel = {"w": np.array([1.0])}, {}
        sgd_step(p, {"w": np.array([1.0])}, vel, 0.1, 0.9, nesterov=False)
        sgd_step(p, {"w": np.array([1.0])}, vel, 0.1, 0.9, nesterov=False)
        assert p["w"][0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9, abs=1e-15)

    def test_lambda_exempt_from_decay(self):
        p = {"0.lam": np.array([0.5]), "0.dict": np.array([0.5])}
        g = {"0.lam": np.array([0.0]), "0.dict": np.array([0.0])}
        sgd_step(p, g, {}, 0.1, momentum=0.0, weight_decay=0.1)
        assert p["0.lam"][0] == 0.5
        assert p["0.dict"][0] == pytest.approx(0.5 - 0.1 * 0.05)
        assert is_lambda("3.first.lam") and not is_lambda("3.first.lambda_x")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, {}, -0.1)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(beta=-1.0), dict(lr0=0.0), dict(epochs=0), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.beta, cfg.lr0, cfg.epochs, cfg.batch_size, cfg.momentum, cfg.nesterov, cfg.weight_decay) == \
            (0.001, 0.1, 280, 256, 0.9, True, 5e-4)


class TestTrainLoop:
    def test_zero_lr_epoch_changes_only_bn_stats(self, monkeypatch):
        monkeypatch.setattr(training, "cosine_lr", lambda *a: 0.0)
        net = toy(lam=0.02)
        before = {k: v.copy() for k, v in net.parameters().items()}
        bufs = {k: v.copy() for k, v in net.named_buffers()}
        train(net, tiny_data(), TrainConfig(epochs=1, batch_size=4))
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k], err_msg=k)
        assert any(not np.array_equal(v, bufs[k]) for k, v in net.named_buffers())
        np.testing.assert_array_equal(net.lambda_vector(), 0.02)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
        a, ta = train(toy(seed=1), tiny_data(), cfg)
        b, tb = train(toy(seed=1), tiny_data(), cfg)
        for (k, v), (_, w) in zip(a.parameters().items(), b.parameters().items()):
            np.testing.assert_array_equal(v, w, err_msg=k)
        assert ta.lambdas == tb.lambdas and ta.loss == tb.loss

    def test_trajectory_shape_and_csv(self, tmp_path):
        net, traj = train(toy(), tiny_data(), TrainConfig(epochs=3, batch_size=5), test=tiny_data(6, seed=1))
        assert len(traj) == 3 and len(traj.train_acc) == 3 and len(traj.test_acc) == 3
        assert len(traj.step_min_lambda) == 3 * 2
        assert traj.test_acc[-1] == evaluate(net, tiny_data(6, seed=1))
        traj.write_csv(tmp_path / "t.csv")
        with open(tmp_path / "t.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "layer_index", "lambda", "train_acc", "test_acc"]
        assert len(rows) == 1 + 3 * 5
        traj.write_metrics_csv(tmp_path / "m.csv")
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "lr", "loss", "train_acc", "test_acc", "mean_lambda"] and len(rows) == 4

    def test_lambda_nonnegative_every_step(self):
        mins = []
        train(toy(lam=0.0), tiny_data(20), TrainConfig(epochs=3, batch_size=4, lr0=0.5),
              on_step=lambda net, e, s: mins.append(net.lambda_vector().min()))
        assert len(mins) == 15 and min(mins) >= 0.0

    def test_lambda_moves_without_excitation(self):
        net, _ = train(toy(lam=0.0), tiny_data(20), TrainConfig(epochs=2, batch_size=4, beta=0.0))
        assert net.lambda_vector().max() > 0.0

    def test_lipschitz_refreshed(self):
        net = toy()
        layer = net.csc_layers()[0]
        train(net, tiny_data(), TrainConfig(epochs=1, batch_size=5, lr0=0.5))
        expect = lipschitz_estimate(layer.params["dict"], layer.spatial) * 1.01
        assert layer.cfg.lipschitz == pytest.approx(expect, rel=1e-12)

    def test_divergence_detected(self, monkeypatch):
        monkeypatch.setattr(training, "ib_loss", lambda *a, **k: float("nan"))
        with pytest.raises(DivergenceError, match="epoch 1, step 1"):
            train(toy(), tiny_data(), TrainConfig(epochs=1, batch_size=5))

    def test_overflow_detected(self):
        with pytest.raises(DivergenceError):
            with np.errstate(all="ignore"):
                train(toy(), tiny_data(), TrainConfig(epochs=2, batch_size=5, lr0=1e300))

    def test_rejects_mismatched_data(self):
        with pytest.raises(ValueError, match="vs net input"):
            train(toy(), LabeledDataset(np.zeros((2, 1, 4, 4)), [0, 1], 2), TrainConfig(epochs=1))

    def test_conv_path_trains(self):
        net, traj = train(toy(kind="conv"), tiny_data(), TrainConfig(epochs=2, batch_size=5, beta=0.0))
        assert net.lambda_vector().size == 0 and traj.mean_lambda().tolist() == [0.0, 0.0]


class TestSmokeBenchmark:
    """The default synthetic benchmark: micro preset, 4 classes, 50 epochs."""

    def test_training_accuracy(self, bench_excited):
        assert bench_excited.summary["epochs"] == 50
        assert bench_excited.train_acc()[-1] >= 0.90

    def test_loss_decreases_over_first_five_epochs(self, bench_excited):
        loss = bench_excited.loss()
        assert loss[4] < loss[0]

    def test_projection_held(self, bench_excited):
        assert bench_excited.summary["min_step_lambda"] >= 0.0
        assert min(bench_excited.step_min) >= 0.0
