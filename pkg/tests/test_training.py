import math

import numpy as np
import pytest

from conftest import make_regression_dataset
from metaconf import episodes, model, training
from metaconf.errors import ConfigError
from metaconf.training import TrainConfig


def small_net(seed=0, input_dim=3, hidden=(6, 5)):
    arch = model.Architecture(input_dim=input_dim, hidden_dims=hidden)
    params = model.init_params(arch, np.random.default_rng(seed))
    return arch, params


def random_batches(rng, arch, n_tr=8, n_te=8):
    vtr = (rng.normal(size=(n_tr, arch.input_dim)), (rng.random(n_tr) < 0.5).astype(float))
    vte = (rng.normal(size=(n_te, arch.input_dim)), (rng.random(n_te) < 0.5).astype(float))
    return vtr, vte


class TestVirtualTrain:
    def test_zero_alpha_is_identity(self):
        arch, params = small_net()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        stepped, _ = training.virtual_train(params, arch, x, y, 0.0)
        assert np.array_equal(stepped, params)

    def test_step_length_matches_gradient_norm(self):
        arch, params = small_net(seed=2)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 3))
        y = (rng.random(6) < 0.5).astype(float)
        alpha = 0.05
        stepped, _ = training.virtual_train(params, arch, x, y, alpha)
        _, grad = model.loss_and_grad(params, arch, x, y)
        assert np.linalg.norm(stepped - params) == pytest.approx(
            alpha * np.linalg.norm(grad), rel=1e-12
        )

    def test_never_mutates_input(self):
        arch, params = small_net(seed=4)
        before = params.tobytes()
        rng = np.random.default_rng(5)
        training.virtual_train(
            params, arch, rng.normal(size=(5, 3)), np.ones(5), 0.1
        )
        assert params.tobytes() == before


class TestVirtualTest:
    def test_same_batch_zero_alpha_equals_train_loss(self):
        arch, params = small_net(seed=6)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 3))
        y = (rng.random(5) < 0.5).astype(float)
        stepped, loss_tr = training.virtual_train(params, arch, x, y, 0.0)
        assert training.virtual_test(stepped, arch, x, y) == loss_tr

    def test_matches_bce_oracle_on_two_samples(self):
        arch, params = small_net(seed=8)
        x = np.array([[0.4, -1.0, 2.0], [1.5, 0.3, -0.2]])
        y = np.array([1.0, 0.0])
        scores = model.forward(params, arch, x)
        expected = -(math.log(scores[0]) + math.log(1 - scores[1])) / 2
        assert training.virtual_test(params, arch, x, y) == pytest.approx(expected, rel=1e-12)


class TestMetaGradient:
    def test_zero_alpha_is_sum_of_plain_gradients(self):
        arch, params = small_net(seed=9)
        vtr, vte = random_batches(np.random.default_rng(10), arch)
        g, _, _ = training.meta_gradient(params, arch, vtr, vte, 0.0)
        _, g_tr = model.loss_and_grad(params, arch, *vtr)
        _, g_te = model.loss_and_grad(params, arch, *vte)
        assert np.allclose(g, g_tr + g_te, rtol=0, atol=0)

    def test_quadratic_closed_form(self):
        # a = b = 1, alpha = 0.1, phi = 2:  g = 2 + 0.81 * 2 = 3.62
        err = training.grad_check_quadratic(1.0, 1.0, 0.1, 2.0)
        assert err < 1e-12

    def test_quadratic_update_value(self):
        phi = np.array([2.0])
        g, _, _ = training._compose_meta_gradient(
            phi,
            lambda p: (0.5 * float(p[0]) ** 2, p.copy()),
            lambda p: (0.5 * float(p[0]) ** 2, p.copy()),
            lambda p, v: v,
             0.1,
            True,
        )
        assert g[0] == pytest.approx(3.62, abs=1e-14)
        assert (phi - 0.01 * g)[0] == pytest.approx(1.9638, abs=1e-14)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        arch, params = small_net(seed=12, hidden=(5, 4))
        for alpha in (1e-3, 1e-2, 1e-1):
            vtr, vte = random_batches(rng, arch)
            err = training.grad_check_batches(params, arch, vtr, vte, alpha)
            assert err < 1e-5

    def test_first_order_misses_curvature(self):
        rng = np.random.default_rng(13)
        arch, params = small_net(seed=14, hidden=(6,))
        vtr, vte = random_batches(rng, arch, n_tr=12, n_te=12)
        err = training.grad_check_batches(
            params, arch, vtr, vte, 0.1, second_order=False
        )
        assert err > 1e-3

    def test_relu_with_second_order_rejected(self):
        arch = model.Architecture(input_dim=2, hidden_dims=(4,), activation="relu")
        params = model.init_params(arch, np.random.default_rng(15))
        vtr, vte = random_batches(np.random.default_rng(16), arch)
        with pytest.raises(ConfigError):
            training.meta_gradient(params, arch, vtr, vte, 0.01, second_order=True)


class TestMetaStep:
    def _episode(self, dataset, batch_size=8, seed=0):
        rng = np.random.default_rng(seed)
        half = np.arange(len(dataset))
        vtr_pool, vte_pool = episodes.split_correctness_pools(dataset, half, 0.6, rng)
        return episodes.build_label_episode(dataset, vtr_pool, vte_pool, batch_size, rng)

    def test_zero_beta_keeps_params(self):
        ds = make_regression_dataset(100)
        arch, params = small_net()
        ep = self._episode(ds)
        cfg = TrainConfig(alpha=0.01, beta=0.0, batch_size=8)
        new_params, _ = training.meta_step(params, arch, ds, ep, cfg)
        assert np.array_equal(new_params, params)

    def test_deterministic_sequence(self):
        ds = make_regression_dataset(100)
        arch, params = small_net()
        ep1 = self._episode(ds, seed=1)
        ep2 = self._episode(ds, seed=2)
        cfg = TrainConfig(alpha=0.01, beta=0.05, batch_size=8)
        a1, _ = training.meta_step(params, arch, ds, ep1, cfg)
        a2, _ = training.meta_step(a1, arch, ds, ep2, cfg)
        b1, _ = training.meta_step(params, arch, ds, ep1, cfg)
        b2, _ = training.meta_step(b1, arch, ds, ep2, cfg)
        assert np.array_equal(a2, b2)

    def test_zero_alpha_equals_joint_update(self):
        ds = make_regression_dataset(100)
        arch, params = small_net()
        ep = self._episode(ds)
        cfg = TrainConfig(alpha=0.0, beta=0.05, batch_size=8)
        meta_params, _ = training.meta_step(params, arch, ds, ep, cfg)
        joint_params, _ = training.joint_step(params, arch, ds, ep, cfg)
        assert np.array_equal(meta_params, joint_params)


class TestTrainLoop:
    def _config(self, **kw):
        base = dict(
            alpha=0.05, beta=0.05, epochs=1, iterations=2, batch_size=8,
            c1_fraction=0.6, n_clusters=3, variant="full", seed=0,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_alternation_label_then_input(self):
        ds = make_regression_dataset(200, clusters=3)
        _, history = training.train(ds, self._config())
        assert [r.kind for r in history] == ["label", "input"]

    def test_full_alternation_many_iterations(self):
        ds = make_regression_dataset(300, clusters=3)
        _, history = training.train(ds, self._config(epochs=2, iterations=6))
        for rec in history:
            expected = "label" if rec.step % 2 == 1 else "input"
            assert rec.kind == expected

    def test_single_problem_variants_use_one_kind(self):
        ds = make_regression_dataset(200, clusters=3)
        _, hist_label = training.train(ds, self._config(variant="label_only"))
        assert {r.kind for r in hist_label} == {"label"}
        _, hist_input = training.train(ds, self._config(variant="input_only"))
        assert {r.kind for r in hist_input} == {"input"}

    def test_joint_never_touches_stepped_params(self, monkeypatch):
        ds = make_regression_dataset(200, clusters=3)
        calls = {"hvp": 0, "virtual": 0}
        real_hvp = model.hessian_vector_product

        def spy_hvp(*a, **k):
            calls["hvp"] += 1
            return real_hvp(*a, **k)

        real_virtual = training.virtual_train

        def spy_virtual(*a, **k):
            calls["virtual"] += 1
            return real_virtual(*a, **k)

        monkeypatch.setattr(model, "hessian_vector_product", spy_hvp)
        monkeypatch.setattr(training, "virtual_train", spy_virtual)
        training.train(ds, self._config(variant="joint", epochs=1, iterations=4))
        assert calls == {"hvp": 0, "virtual": 0}

    def test_smoke_losses_finite(self):
        ds = make_regression_dataset(400, correct_rate=0.8, clusters=4, seed=5)
        params, history = training.train(
            ds, self._config(epochs=3, iterations=10, variant="full")
        )
        assert np.all(np.isfinite(params))
        for rec in history:
            assert math.isfinite(rec.loss_vtr)
            assert rec.loss_vte is None or math.isfinite(rec.loss_vte)

    def test_bit_identical_given_seed(self):
        ds = make_regression_dataset(200, clusters=3)
        cfg = self._config(epochs=2, iterations=4)
        p1, _ = training.train(ds, cfg)
        p2, _ = training.train(ds, cfg)
        assert p1.tobytes() == p2.tobytes()

    def test_baseline_variants_run(self):
        ds = make_regression_dataset(150, correct_rate=0.8)
        for variant in ("reweight", "resample", "plain"):
            params, history = training.train(
                ds, self._config(variant=variant, epochs=1, iterations=5)
            )
            assert len(history) == 5
            assert all(r.kind == "batch" for r in history)
            assert np.all(np.isfinite(params))

    def test_pool_violation_raises_before_training(self):
        ds = make_regression_dataset(40)
        with pytest.raises(ConfigError):
            training.train(ds, self._config(batch_size=16))

    def test_variant_checkpoints_differ(self):
        ds = make_regression_dataset(300, clusters=3, seed=6)
        cfg_full = self._config(epochs=2, iterations=6, alpha=0.1, beta=0.05)
        cfg_joint = self._config(epochs=2, iterations=6, alpha=0.1, beta=0.05, variant="joint")
        p_full, _ = training.train(ds, cfg_full)
        p_joint, _ = training.train(ds, cfg_joint)
        assert not np.array_equal(p_full, p_joint)

    def test_history_serializes_to_jsonl(self, tmp_path):
        ds = make_regression_dataset(200, clusters=3)
        _, history = training.train(ds, self._config())
        path = tmp_path / "history.jsonl"
        training.serialize_history(history, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(history)
        import json

        rec = json.loads(lines[0])
        assert set(rec) == {
            "iteration", "epoch", "step", "kind", "loss_vtr", "loss_vte",
            "grad_norm", "provenance",
        }


class TestTrainConfig:
    def test_rejects_negative_rates(self):
        with pytest.raises(ConfigError):
            TrainConfig(alpha=-1.0)

    def test_rejects_unknown_variant(self):
        with pytest.raises(ConfigError):
            TrainConfig(variant="magic")

    def test_rejects_bad_fraction(self):
        with pytest.raises(ConfigError):
            TrainConfig(c1_fraction=1.0)


class TestGradCheck:
    def test_episode_grad_check_passes(self):
        ds = make_regression_dataset(200, clusters=3)
        arch, params = small_net()
        rng = np.random.default_rng(20)
        half = np.arange(len(ds))
        vtr_pool, vte_pool = episodes.split_correctness_pools(ds, half, 0.6, rng)
        ep = episodes.build_label_episode(ds, vtr_pool, vte_pool, 8, rng)
        err = training.grad_check(params, arch, ds, ep, alpha=0.05)
        assert err < 1e-5

    def test_quadratic_exact(self):
        assert training.grad_check_quadratic(2.0, 3.0, 0.05, -1.7) < 1e-12

    def test_large_net_uses_directions(self):
        arch = model.Architecture(input_dim=10, hidden_dims=(32, 32))
        params = model.init_params(arch, np.random.default_rng(21))
        assert model.param_count(arch) > 500
        rng = np.random.default_rng(22)
        vtr, vte = random_batches(rng, arch)
        err = training.grad_check_batches(params, arch, vtr, vte, 0.01)
        assert err < 1e-5
