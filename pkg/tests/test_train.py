"""Optimizer, schedules, training loop, and the gradient checker."""
import json
import math

import numpy as np
import pytest

import fairclust as fc
from fairclust.errors import ConfigError, DataError, NumericError
from fairclust.model import init_params, param_order
from fairclust.train import (
    LOG_FIELDS,
    OptimizerState,
    TrainConfig,
    _clip_grads,
    adam_step,
    cosine_lr,
    gradient_check,
    init_optimizer,
    lambda_schedule,
    train,
    write_log_jsonl,
)


class TestCosineLr:
    CFG = TrainConfig(lr0=1e-3, lr_min=1e-5)

    def test_endpoints(self):
        assert cosine_lr(0, 100, self.CFG) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, self.CFG) == pytest.approx(1e-5)

    def test_midpoint_is_mean(self):
        assert cosine_lr(50, 100, self.CFG) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_quarter_point(self):
        want = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1 + math.cos(math.pi / 4))
        assert cosine_lr(25, 100, self.CFG) == pytest.approx(want, rel=1e-12)

    def test_constant_when_min_equals_max(self):
        cfg = TrainConfig(lr0=5e-4, lr_min=5e-4)
        for step in (0, 3, 10):
            assert cosine_lr(step, 10, cfg) == pytest.approx(5e-4)

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 20, self.CFG) for s in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_bounds(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, self.CFG)
        with pytest.raises(ValueError):
            cosine_lr(11, 10, self.CFG)
        with pytest.raises(ValueError):
            cosine_lr(0, 0, self.CFG)


class TestLambdaSchedule:
    def test_zero_through_warmup_then_linear(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=2, lambda_max=1.0)
        got = [lambda_schedule(e, cfg) for e in range(10)]
        want = [0.0, 0.0] + [i / 8 for i in range(1, 9)]
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_no_warmup_reaches_max(self):
        cfg = TrainConfig(epochs=8, warmup_epochs=0, lambda_max=1.0)
        assert lambda_schedule(0, cfg) == pytest.approx(1 / 8)
        assert lambda_schedule(7, cfg) == pytest.approx(1.0)

    def test_scales_with_max(self):
        cfg = TrainConfig(epochs=4, warmup_epochs=0, lambda_max=2.5)
        assert lambda_schedule(3, cfg) == pytest.approx(2.5)

    def test_warmup_covering_all_epochs(self):
        cfg = TrainConfig(epochs=4, warmup_epochs=4)
        assert [lambda_schedule(e, cfg) for e in range(4)] == [0.0] * 4

    def test_epoch_bounds(self):
        cfg = TrainConfig(epochs=4)
        with pytest.raises(ValueError):
            lambda_schedule(-1, cfg)
        with pytest.raises(ValueError):
            lambda_schedule(4, cfg)


class TestConfigValidation:
    def test_defaults_valid(self):
        TrainConfig().validate()

    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0},
        {"batch_size": 0},
        {"lr0": 0.0},
        {"lr0": 1e-4, "lr_min": 2e-4},
        {"lr_min": -1e-9},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"warmup_epochs": 11},
        {"warmup_epochs": -1},
        {"lambda_max": -0.5},
        {"loss": "hinge"},
        {"grad_clip": 0.0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()


def reference_adam(tensors, grad_seq, lr, cfg):
    """Straight-line Adam from zero moments over a list of gradient dicts."""
    out = {k: v.copy() for k, v in tensors.items()}
    m = {k: np.zeros_like(v) for k, v in tensors.items()}
    v = {k: np.zeros_like(val) for k, val in tensors.items()}
    for t, grads in enumerate(grad_seq, start=1):
        for name in out:
            g = grads[name]
            m[name] = cfg.beta1 * m[name] + (1 - cfg.beta1) * g
            v[name] = cfg.beta2 * v[name] + (1 - cfg.beta2) * g * g
            mhat = m[name] / (1 - cfg.beta1 ** t)
            vhat = v[name] / (1 - cfg.beta2 ** t)
            out[name] -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return out


class TestAdam:
    def test_matches_reference_over_two_steps(self, tiny_hyper, rng):
        cfg = TrainConfig(lr0=1e-2)
        params = init_params(tiny_hyper, seed=1)
        start = {k: v.copy() for k, v in params.tensors.items()}
        grad_seq = [{k: rng.normal(size=v.shape) for k, v in start.items()}
                    for _ in range(2)]
        state = init_optimizer(params)
        for grads in grad_seq:
            adam_step(params, grads, state, 1e-2, cfg)
        want = reference_adam(start, grad_seq, 1e-2, cfg)
        assert state.step == 2
        for name in start:
            np.testing.assert_allclose(params.tensors[name], want[name],
                                       rtol=0, atol=1e-14, err_msg=name)

    def test_first_step_is_signed_lr(self, tiny_hyper, rng):
        # with zero moments, one update moves each weight by about -lr*sign(g)
        cfg = TrainConfig(lr0=1e-3)
        params = init_params(tiny_hyper, seed=1)
        before = params.tensors["head_w"].copy()
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["head_w"] = np.full(8, 2.0)
        adam_step(params, grads, init_optimizer(params), 1e-3, cfg)
        np.testing.assert_allclose(params.tensors["head_w"],
                                   before - 1e-3, rtol=1e-6)

    def test_non_finite_gradient_names_parameter(self, tiny_hyper):
        params = init_params(tiny_hyper, seed=1)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["corr_w"][0, 0] = np.nan
        with pytest.raises(NumericError, match="corr_w"):
            adam_step(params, grads, init_optimizer(params), 1e-3,
                      TrainConfig())


class TestGradClip:
    def test_rescales_above_limit(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
        _clip_grads(grads, 2.5)
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        assert total == pytest.approx(2.5)
        np.testing.assert_allclose(grads["a"], [1.5, 2.0])

    def test_leaves_small_gradients_alone(self):
        grads = {"a": np.array([0.3, 0.4])}
        _clip_grads(grads, 2.5)
        np.testing.assert_allclose(grads["a"], [0.3, 0.4])


@pytest.fixture(scope="module")
def fit_setup():
    spec = fc.SyntheticSpec(dim=8, seed=5, groups=(
        fc.GroupSpec("major", 10, (3, 3), 0.05),
        fc.GroupSpec("minor", 5, (3, 3), 0.2)))
    dataset = fc.l2_normalize(fc.generate_synthetic(spec))
    cache = fc.knn_batch(dataset, 6)
    return dataset, cache


def small_train(dataset, cache, **overrides):
    kwargs = dict(epochs=3, batch_size=8, lr0=3e-3, lr_min=1e-4,
                  warmup_epochs=1, lambda_max=1.0, seed=2)
    kwargs.update(overrides)
    cfg = TrainConfig(**kwargs)
    hyper = fc.Hyper(d=8, k=2, s=3, n_block=1, n_head=2, ff_dim=16)
    params = init_params(hyper, seed=7)
    return train(dataset, params, cfg, clusters=cache)


class TestTrainLoop:
    def test_log_schema(self, fit_setup):
        dataset, cache = fit_setup
        _, logs = small_train(dataset, cache)
        assert len(logs) == 3
        steps_per_epoch = math.ceil(dataset.count / 8)
        for e, row in enumerate(logs):
            assert tuple(row) == LOG_FIELDS
            assert row["epoch"] == e
            assert row["step"] == (e + 1) * steps_per_epoch
            assert row["lr"] > 0
            assert row["lambda"] == lambda_schedule(
                e, TrainConfig(epochs=3, warmup_epochs=1, lambda_max=1.0))
            assert 0 < row["gamma_mean"] <= 1.5
            assert row["gamma_std"] >= 0

    def test_loss_decreases_on_easy_data(self, fit_setup):
        dataset, cache = fit_setup
        _, logs = small_train(dataset, cache, epochs=6, lambda_max=0.0)
        assert logs[-1]["fmi_loss"] < logs[0]["fmi_loss"]
        assert logs[-1]["fmi_loss"] < 0.25

    def test_deterministic_given_seeds(self, fit_setup):
        dataset, cache = fit_setup
        p1, logs1 = small_train(dataset, cache)
        p2, logs2 = small_train(dataset, cache)
        for name in p1.tensors:
            np.testing.assert_array_equal(p1.tensors[name], p2.tensors[name])
        assert logs1 == logs2

    def test_train_seed_changes_result(self, fit_setup):
        dataset, cache = fit_setup
        p1, _ = small_train(dataset, cache, seed=2)
        p2, _ = small_train(dataset, cache, seed=3)
        assert any(not np.array_equal(p1.tensors[n], p2.tensors[n])
                   for n in p1.tensors)

    def test_bce_arm_runs(self, fit_setup):
        dataset, cache = fit_setup
        _, logs = small_train(dataset, cache, loss="bce", lambda_max=0.0)
        assert logs[-1]["fmi_loss"] < logs[0]["fmi_loss"]

    def test_detached_reference_changes_fair_gradient(self, fit_setup):
        dataset, cache = fit_setup
        p1, _ = small_train(dataset, cache, detach_reference=False)
        p2, _ = small_train(dataset, cache, detach_reference=True)
        assert any(not np.array_equal(p1.tensors[n], p2.tensors[n])
                   for n in p1.tensors)

    def test_requires_labels(self, fit_setup, tiny_hyper):
        dataset, cache = fit_setup
        stripped = fc.EmbeddingSet(dataset.vectors)
        params = init_params(fc.Hyper(d=8, k=2, s=3, n_block=1, n_head=2,
                                      ff_dim=16), seed=0)
        with pytest.raises(DataError):
            train(stripped, params, TrainConfig(), clusters=cache)

    def test_rejects_mismatched_cache(self, fit_setup):
        dataset, cache = fit_setup
        params = init_params(fc.Hyper(d=8, k=2, s=4, n_block=1, n_head=2,
                                      ff_dim=16), seed=0)  # expects n=8
        with pytest.raises(ConfigError):
            train(dataset, params, TrainConfig(), clusters=cache)

    def test_rejects_targetless_cache(self, fit_setup):
        dataset, cache = fit_setup
        bare = fc.ClusterCache(cache.n, cache.indices, cache.members,
                               cache.similarities, None)
        params = init_params(fc.Hyper(d=8, k=2, s=3, n_block=1, n_head=2,
                                      ff_dim=16), seed=0)
        with pytest.raises(DataError):
            train(dataset, params, TrainConfig(), clusters=bare)

    def test_grad_clip_changes_trajectory(self, fit_setup):
        dataset, cache = fit_setup
        p1, _ = small_train(dataset, cache)
        p2, _ = small_train(dataset, cache, grad_clip=1e-3)
        assert any(not np.array_equal(p1.tensors[n], p2.tensors[n])
                   for n in p1.tensors)


class TestLogWriter:
    def test_round_trip_with_header(self, fit_setup, tmp_path):
        dataset, cache = fit_setup
        _, logs = small_train(dataset, cache)
        path = tmp_path / "log.jsonl"
        write_log_jsonl(logs, path, header={"config_hash": "deadbeef"})
        lines = path.read_text().splitlines()
        assert json.loads(lines[0]) == {"config_hash": "deadbeef"}
        rows = [json.loads(line) for line in lines[1:]]
        assert len(rows) == len(logs)
        for row, src in zip(rows, logs):
            assert tuple(row) == LOG_FIELDS
            assert row["fmi_loss"] == pytest.approx(src["fmi_loss"])

    def test_no_header(self, fit_setup, tmp_path):
        dataset, cache = fit_setup
        _, logs = small_train(dataset, cache)
        path = tmp_path / "log.jsonl"
        write_log_jsonl(logs, path)
        assert len(path.read_text().splitlines()) == len(logs)


class TestGradientCheck:
    def test_zero_trials_empty_report(self):
        assert gradient_check(trials=0) == {}

    def test_analytic_matches_finite_differences(self):
        report = gradient_check(trials=2, seed=1)
        assert set(report) == {name for name, _ in param_order(
            fc.Hyper(d=8, k=2, s=4, n_block=1, n_head=2, ff_dim=16))}
        assert max(report.values()) < 1e-4
