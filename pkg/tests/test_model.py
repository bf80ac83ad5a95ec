import numpy as np
import pytest

from zinbvae.distributions import ZinbParams, zinb_log_pmf
from zinbvae.errors import ConfigError, ShapeError
from zinbvae.model import (
    ModelConfig,
    decode,
    elbo_loss,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

from fdcheck import finite_difference, max_rel_err


def toy_config(**overrides):
    base = dict(
        n_genes=5,
        latent_dim=2,
        hidden_width=8,
        hidden_depth=2,
        dropout_rate=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_counts(rng, n_cells=4, n_genes=5):
    x = rng.poisson(3.0, size=(n_cells, n_genes)).astype(float)
    x[0, 0] = 0.0
    return x


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_genes=5, latent_dim=0)
        with pytest.raises(ConfigError):
            ModelConfig(n_genes=5, dropout_rate=1.0)
        with pytest.raises(ConfigError):
            ModelConfig(n_genes=5, dispersion_mode="nope")

    def test_round_trip(self):
        cfg = toy_config(latent_mode="point-mass")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_output_shapes(self):
        cfg = toy_config()
        params = init_params(cfg, np.random.default_rng(0))
        q = encode(np.arange(5.0), None, params)
        assert q.mean.shape == (2,)
        assert q.std.shape == (2,)

    def test_identical_cells_identical_posteriors(self):
        cfg = toy_config()
        params = init_params(cfg, np.random.default_rng(0))
        x = np.array([[1.0, 0.0, 3.0, 2.0, 5.0]] * 2)
        q = encode(x, None, params, mode="eval")
        np.testing.assert_array_equal(q.mean[0], q.mean[1])
        np.testing.assert_array_equal(q.std[0], q.std[1])

    def test_fresh_network_std_positive(self):
        for seed in range(5):
            params = init_params(toy_config(), np.random.default_rng(seed))
            x = np.random.default_rng(seed + 100).poisson(4.0, size=(3, 5)).astype(float)
            q = encode(x, None, params)
            assert np.all(np.isfinite(q.std)) and np.all(q.std > 0)


class TestDecode:
    def test_outputs_satisfy_zinb_invariants(self):
        cfg = toy_config()
        params = init_params(cfg, np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(1000, 2))
        p = decode(z, None, params)
        ZinbParams(p.mu, p.theta, p.pi)  # raises if any invariant is violated
        assert p.mu.shape == (1000, 5)

    def test_per_gene_dispersion_ignores_latent(self):
        cfg = toy_config(dispersion_mode="per-gene")
        params = init_params(cfg, np.random.default_rng(3))
        p1 = decode(np.array([0.0, 0.0]), None, params)
        p2 = decode(np.array([5.0, -7.0]), None, params)
        np.testing.assert_array_equal(p1.theta, p2.theta)

    def test_per_entry_dispersion_depends_on_latent(self):
        cfg = toy_config(dispersion_mode="per-entry")
        params = init_params(cfg, np.random.default_rng(3))
        p1 = decode(np.array([0.0, 0.0]), None, params)
        p2 = decode(np.array([5.0, -7.0]), None, params)
        assert not np.allclose(p1.theta, p2.theta)

    def test_zeroed_trunk_gives_exp_bias_mean(self):
        cfg = toy_config(dropout_rate=0.0)
        params = init_params(cfg, np.random.default_rng(4))
        for i in range(cfg.hidden_depth):
            params.tensors[f"dec.lin{i}.w"].data[:] = 0.0
            params.tensors[f"dec.lin{i}.b"].data[:] = 0.0
        bias = np.array([0.3, -1.0, 0.0, 2.0, 1.2])
        params.tensors["dec.mu.b"].data[:] = bias
        p = decode(np.zeros(2), None, params)
        np.testing.assert_allclose(p.mu, np.exp(bias), rtol=1e-12)


class TestElbo:
    def test_point_mass_kl_is_zero(self):
        cfg = toy_config(latent_mode="point-mass")
        params = init_params(cfg, np.random.default_rng(5))
        x = toy_counts(np.random.default_rng(6))
        loss, _, parts = elbo_loss(x, None, params, np.random.default_rng(7))
        assert parts["kl"] == 0.0
        assert loss.data == pytest.approx(-parts["recon"])

    def test_standard_posterior_zeroes_kl(self):
        # encoder forced to output mean 0, log-var 0 -> KL identically zero
        cfg = toy_config(dropout_rate=0.0)
        params = init_params(cfg, np.random.default_rng(8))
        for name in ("enc.mean.w", "enc.logvar.w"):
            params.tensors[name].data[:] = 0.0
        params.tensors["enc.mean.b"].data[:] = 0.0
        params.tensors["enc.logvar.b"].data[:] = 0.0
        x = toy_counts(np.random.default_rng(9))
        loss, _, parts = elbo_loss(x, None, params, np.random.default_rng(10), mode="eval")
        assert parts["kl"] == pytest.approx(0.0, abs=1e-14)
        assert loss.data == pytest.approx(-parts["recon"])
        # and the latent draw is exactly the standard-normal eps
        eps = np.random.default_rng(10).standard_normal((4, 2))
        p = decode(eps, None, params, mode="eval")
        manual = -np.mean(zinb_log_pmf(x, ZinbParams(p.mu, p.theta, p.pi)).sum(axis=1))
        assert float(loss.data) == pytest.approx(manual, rel=1e-10)

    def test_negative_elbo_dominates_reconstruction_term(self):
        cfg = toy_config()
        params = init_params(cfg, np.random.default_rng(11))
        x = toy_counts(np.random.default_rng(12))
        loss, _, parts = elbo_loss(x, None, params, np.random.default_rng(13))
        assert parts["kl"] >= 0.0
        assert float(loss.data) >= -parts["recon"] - 1e-12

    def test_empty_batch_rejected(self):
        params = init_params(toy_config(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            elbo_loss(np.zeros((0, 5)), None, params, np.random.default_rng(0))

    def test_gene_mismatch_rejected(self):
        params = init_params(toy_config(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            elbo_loss(np.zeros((3, 7)), None, params, np.random.default_rng(0))

    @pytest.mark.parametrize("latent_mode", ["stochastic", "point-mass"])
    @pytest.mark.parametrize("dispersion_mode", ["per-gene", "per-entry"])
    def test_gradients_match_finite_differences(self, latent_mode, dispersion_mode):
        cfg = toy_config(latent_mode=latent_mode, dispersion_mode=dispersion_mode)
        params = init_params(cfg, np.random.default_rng(14))
        x = toy_counts(np.random.default_rng(15))

        def loss_value():
            loss, _, _ = elbo_loss(x, None, params, np.random.default_rng(16))
            return float(loss.data)

        loss, tape, _ = elbo_loss(x, None, params, np.random.default_rng(16))
        grads = tape.backward(loss, leaves=params.trainable())
        names = params.trainable_names()
        fd = finite_difference(loss_value, [params.tensors[n].data for n in names])
        for name, numeric in zip(names, fd):
            analytic = grads[params.tensors[name].tid]
            assert max_rel_err(analytic, numeric) < 1e-4, name

    def test_covariates_enter_both_networks(self):
        cfg = toy_config(covariate_dim=2, encoder_sees_covariates=True, dropout_rate=0.0)
        params = init_params(cfg, np.random.default_rng(17))
        x = toy_counts(np.random.default_rng(18))
        cov_a = np.tile([1.0, 0.0], (4, 1))
        cov_b = np.tile([0.0, 1.0], (4, 1))
        la, _, _ = elbo_loss(x, cov_a, params, np.random.default_rng(19), mode="eval")
        lb, _, _ = elbo_loss(x, cov_b, params, np.random.default_rng(19), mode="eval")
        assert float(la.data) != float(lb.data)

    def test_missing_covariates_rejected(self):
        cfg = toy_config(covariate_dim=2)
        params = init_params(cfg, np.random.default_rng(17))
        with pytest.raises(ShapeError):
            elbo_loss(toy_counts(np.random.default_rng(0)), None, params, np.random.default_rng(0))


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path):
        cfg = toy_config(covariate_dim=0)
        params = init_params(cfg, np.random.default_rng(20))
        # perturb buffers away from defaults so they are exercised too
        params.buffers["enc.bn0.mean"][:] = 0.25
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path)
        restored = load_checkpoint(path)
        assert restored.config == cfg
        x = toy_counts(np.random.default_rng(21))
        l0, _, _ = elbo_loss(x, None, params, np.random.default_rng(22), mode="eval")
        l1, _, _ = elbo_loss(x, None, restored, np.random.default_rng(22), mode="eval")
        assert float(l0.data) == float(l1.data)
        for name in params.tensors:
            np.testing.assert_array_equal(params.tensors[name].data, restored.tensors[name].data)
        for name in params.buffers:
            np.testing.assert_array_equal(params.buffers[name], restored.buffers[name])

    def test_save_is_deterministic(self, tmp_path):
        params = init_params(toy_config(), np.random.default_rng(23))
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(params, p1)
        save_checkpoint(params, p2)
        assert p1.read_bytes() == p2.read_bytes()
