import dataclasses

import numpy as np
import pytest

from ridegym.config import desk_scale, load_scene
from ridegym.estimators import (
    BetaParamModel,
    FeatureScaler,
    LogisticUpliftModel,
    TrainConfig,
    auc_score,
    beta_loss_grads,
    build_target_dataset,
    evaluate_auc,
    fit_beta_param_model,
    fit_logistic,
    load_checkpoint,
    logistic_loss_grads,
    predict,
    save_checkpoint,
    train_target,
)
from ridegym.nets import flatten, sigmoid, unflatten
from ridegym.simulator import run_logged_episode

COUPONS = np.array([0.0, 0.05, 0.10, 0.15, 0.20])


def synthetic_generator(rng, n, dim=4):
    """Data from a known treatment-effect model with C = 1."""
    x = rng.normal(0.0, 1.0, size=(n, dim))
    d = rng.choice(COUPONS, size=n)
    w1 = rng.normal(0.0, 1.0, size=dim)
    w2 = rng.normal(0.0, 0.5, size=dim)
    logits = 5.0 * sigmoid(x @ w1 + 0.2) * d + x @ w2 - 0.4
    p = sigmoid(logits)
    y = (rng.uniform(size=n) < p).astype(float)
    return (x, d, y), p


def subset(log, lo, hi):
    return dataclasses.replace(
        log,
        features=log.features[lo:hi], base_price=log.base_price[lo:hi],
        coupon_index=log.coupon_index[lo:hi], y_in=log.y_in[lo:hi],
        y_complete=log.y_complete[lo:hi], slot=log.slot[lo:hi],
    )


@pytest.fixture(scope="module")
def scene1_pretrain():
    config = desk_scale(load_scene(1))
    log = run_logged_episode(config, COUPONS, config.slots_pretrain)
    n = log.features.shape[0]
    split = int(0.8 * n)
    return subset(log, 0, split), subset(log, split, n)


class TestFitLogistic:
    def test_all_zero_labels_predict_low(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2000, 4))
        d = rng.choice(COUPONS, size=2000)
        y = np.zeros(2000)
        model = fit_logistic((x, d, y), TrainConfig(), rng=np.random.default_rng(1))
        assert (model.predict(x, d) < 0.1).all()

    def test_recovers_synthetic_generator(self):
        rng = np.random.default_rng(2)
        (x, d, y), _ = synthetic_generator(rng, 12_000)
        (hx, hd, _), hp = synthetic_generator(np.random.default_rng(3), 4_000)
        model = fit_logistic((x, d, y), TrainConfig(), rng=np.random.default_rng(4))
        mae = np.abs(model.predict(hx, hd) - hp).mean()
        assert mae <= 0.05

    def test_single_coupon_warns(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(200, 4))
        with pytest.warns(UserWarning, match="single coupon"):
            fit_logistic((x, np.full(200, 0.1), rng.integers(0, 2, 200)), TrainConfig())

    def test_scene1_f_in_auc_band(self, scene1_pretrain):
        train, held_out = scene1_pretrain
        model = train_target(train, COUPONS, "f_in", seed=0)
        auc = evaluate_auc(model, build_target_dataset(held_out, COUPONS, "f_in"))
        assert 0.70 <= auc <= 0.82

    def test_scene1_w_auc_band(self, scene1_pretrain):
        train, held_out = scene1_pretrain
        model = train_target(train, COUPONS, "w", seed=0)
        auc = evaluate_auc(model, build_target_dataset(held_out, COUPONS, "w"))
        assert 0.85 <= auc <= 0.95


class TestPredict:
    def make_zero_model(self):
        scaler = FeatureScaler(np.zeros(4), np.ones(4))
        params = [np.zeros(4), np.zeros(1), np.zeros(4), np.zeros(1), np.ones(1)]
        return LogisticUpliftModel(scaler, params, "z")

    def test_zero_logit_gives_half(self):
        model = self.make_zero_model()
        assert predict(model, np.zeros((1, 4)), 0.0)[0] == pytest.approx(0.5)

    def test_clipping_bounds(self):
        model = self.make_zero_model()
        model.params[3][0] = 100.0
        assert predict(model, np.zeros((1, 4)), 0.0)[0] == pytest.approx(1.0 - 1e-6)
        model.params[3][0] = -100.0
        assert predict(model, np.zeros((1, 4)), 0.0)[0] == pytest.approx(1e-6)

    def test_monotone_in_treatment_after_training(self):
        rng = np.random.default_rng(6)
        (x, d, y), _ = synthetic_generator(rng, 8_000)
        model = fit_logistic((x, d, y), TrainConfig(), rng=np.random.default_rng(7))
        probe = rng.normal(size=(200, 4))
        assert (model.predict(probe, 0.3) >= model.predict(probe, 0.0) - 1e-9).all()

    def test_batch_order_preserved(self):
        rng = np.random.default_rng(8)
        (x, d, y), _ = synthetic_generator(rng, 2_000)
        model = fit_logistic((x, d, y), TrainConfig(epochs=5), rng=np.random.default_rng(9))
        batch = model.predict(x[:50], d[:50])
        singles = np.array([model.predict(x[i : i + 1], d[i]) [0] for i in range(50)])
        assert np.allclose(batch, singles)

    def test_dimension_mismatch_rejected(self):
        model = self.make_zero_model()
        with pytest.raises(ValueError):
            model.predict(np.zeros((3, 5)), 0.1)

    def test_predict_matrix_matches_vector_predict(self):
        rng = np.random.default_rng(10)
        (x, d, y), _ = synthetic_generator(rng, 1_000)
        model = fit_logistic((x, d, y), TrainConfig(epochs=5), rng=np.random.default_rng(11))
        grid = model.predict_matrix(x[:20], COUPONS)
        for j, dj in enumerate(COUPONS):
            assert np.allclose(grid[:, j], model.predict(x[:20], dj))


class TestBetaParamModel:
    def test_calibrates_to_half_rate_bucket(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(6_000, 4))
        d = rng.choice(COUPONS, size=6_000)
        y = (rng.uniform(size=6_000) < 0.5).astype(float)
        model = fit_beta_param_model((x, d, y), TrainConfig(), rng=np.random.default_rng(13))
        alpha, beta = model.predict(x, d)
        mean = (alpha / (alpha + beta)).mean()
        assert 0.4 <= mean <= 0.6

    def test_all_in_range_saturates_high(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(4_000, 4))
        d = rng.choice(COUPONS, size=4_000)
        model = fit_beta_param_model(
            (x, d, np.ones(4_000)), TrainConfig(), rng=np.random.default_rng(15)
        )
        alpha, beta = model.predict(x, d)
        assert (alpha / (alpha + beta)).mean() > 0.8

    def test_outputs_strictly_positive(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2_000, 4))
        d = rng.choice(COUPONS, size=2_000)
        y = rng.integers(0, 2, size=2_000).astype(float)
        model = fit_beta_param_model((x, d, y), TrainConfig(epochs=3), rng=np.random.default_rng(17))
        probe_x = rng.normal(0.0, 5.0, size=(10_000, 4))
        probe_d = rng.choice(COUPONS, size=10_000)
        alpha, beta = model.predict(probe_x, probe_d)
        assert (alpha > 0).all() and (beta > 0).all()

    def test_bucket_calibration_within_mae(self):
        # per (sign bucket, coupon) rates spanning low to high
        rng = np.random.default_rng(18)
        x = rng.normal(size=(12_000, 4))
        d = rng.choice(COUPONS, size=12_000)
        rate = 0.2 + 0.5 * (x[:, 0] > 0) + 1.2 * d
        rate = np.clip(rate, 0.05, 0.95)
        y = (rng.uniform(size=12_000) < rate).astype(float)
        model = fit_beta_param_model((x, d, y), TrainConfig(), rng=np.random.default_rng(19))
        alpha, beta = model.predict(x, d)
        pred = alpha / (alpha + beta)
        errs = []
        for sign in (0, 1):
            for dj in COUPONS:
                mask = ((x[:, 0] > 0) == sign) & (d == dj)
                errs.append(abs(pred[mask].mean() - y[mask].mean()))
        assert np.mean(errs) <= 0.1


class TestAuc:
    def test_perfect_ranking(self):
        assert auc_score(np.array([0, 0, 1, 1]), np.array([0.1, 0.2, 0.8, 0.9])) == 1.0

    def test_constant_predictions(self):
        labels = np.array([0, 1, 0, 1, 1])
        assert auc_score(labels, np.full(5, 0.4)) == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc_score(np.ones(5), np.linspace(0, 1, 5))

    def test_scene_degradation_direction(self):
        # competition degrades test-split predictability of completions
        aucs = {}
        for scene in (1, 3):
            config = desk_scale(load_scene(scene))
            pre = run_logged_episode(config, COUPONS, config.slots_pretrain)
            train = run_logged_episode(
                config, COUPONS, config.slots_train,
                start_multipliers=pre.end_multipliers, slot_offset=config.slots_pretrain,
            )
            test = run_logged_episode(
                config, COUPONS, config.slots_test, context=(1, 0, 0),
                start_multipliers=train.end_multipliers,
                slot_offset=config.slots_pretrain + config.slots_train,
            )
            model = train_target(pre, COUPONS, "z", seed=0)
            aucs[scene] = evaluate_auc(model, build_target_dataset(test, COUPONS, "z"))
        assert aucs[3] <= aucs[1] + 0.02


class TestGradients:
    def directional_check(self, loss_grads, params, n_points=100, h=1e-5, seed=20):
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_points):
            theta = [rng.normal(0.0, 0.5, size=p.shape) for p in params]
            loss, grads = loss_grads(theta)
            direction = [rng.normal(size=p.shape) for p in params]
            norm = np.sqrt(sum((v**2).sum() for v in direction))
            direction = [v / norm for v in direction]
            plus = [p + h * v for p, v in zip(theta, direction)]
            minus = [p - h * v for p, v in zip(theta, direction)]
            fd = (loss_grads(plus)[0] - loss_grads(minus)[0]) / (2 * h)
            analytic = sum((g * v).sum() for g, v in zip(grads, direction))
            denom = max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, abs(fd - analytic) / denom)
        assert worst < 1e-4

    def test_logistic_loss_gradients(self):
        rng = np.random.default_rng(21)
        xs = rng.normal(size=(64, 4))
        d = rng.choice(COUPONS, size=64)
        y = rng.integers(0, 2, size=64).astype(float)
        template = [np.zeros(4), np.zeros(1), np.zeros(4), np.zeros(1), np.ones(1)]

        self.directional_check(
            lambda theta: logistic_loss_grads(theta, xs, d, y), template
        )

    def test_beta_loss_gradients(self):
        rng = np.random.default_rng(22)
        inputs = rng.normal(size=(64, 5))
        y = rng.integers(0, 2, size=64).astype(float)
        template_model = BetaParamModel.init(
            4, np.random.default_rng(0), FeatureScaler(np.zeros(4), np.ones(4)), 6.0
        )
        self.directional_check(
            lambda theta: beta_loss_grads(theta, inputs, y, anchor=6.0),
            template_model.params,
        )


class TestCheckpoints:
    def test_logistic_roundtrip(self, tmp_path):
        rng = np.random.default_rng(23)
        (x, d, y), _ = synthetic_generator(rng, 1_000)
        model = fit_logistic((x, d, y), TrainConfig(epochs=3), target="w", rng=rng)
        path = tmp_path / "w.ckpt"
        model.save(path)
        loaded = LogisticUpliftModel.load(path)
        assert loaded.target == "w"
        assert np.allclose(loaded.predict(x[:20], d[:20]), model.predict(x[:20], d[:20]))

    def test_beta_roundtrip(self, tmp_path):
        rng = np.random.default_rng(24)
        x = rng.normal(size=(1_000, 4))
        d = rng.choice(COUPONS, size=1_000)
        y = rng.integers(0, 2, size=1_000).astype(float)
        model = fit_beta_param_model((x, d, y), TrainConfig(epochs=3), rng=rng, anchor=6.0)
        path = tmp_path / "beta.ckpt"
        model.save(path)
        loaded = BetaParamModel.load(path)
        a0, b0 = model.predict(x[:20], d[:20])
        a1, b1 = loaded.predict(x[:20], d[:20])
        assert np.allclose(a0, a1) and np.allclose(b0, b1)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_kind_mismatch_rejected(self, tmp_path):
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, kind="policy", arrays={"p0": np.zeros(3)}, meta={})
        with pytest.raises(ValueError, match="policy"):
            LogisticUpliftModel.load(path)
