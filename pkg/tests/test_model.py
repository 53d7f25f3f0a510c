"""Reconstruction loss, SQ-VAE objective and the posterior regularizers."""
import math

import numpy as np
import pytest

from vqgb.diffcore import MlpSpec, grad_check, init_params
from vqgb.model import (ModelParams, cdvib_regularizer, entropy_of_posteriors, flatten_grads,
                        mixed_regularizer, reconstruction_loss_l0, reconstruction_losses,
                        sqvae_loss, vq_loss)
from vqgb.quantizer import Codebook


def make_params(d=2, dz=2, K=4, hidden=5, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return ModelParams.initialize(MlpSpec.build(d, [hidden], dz), MlpSpec.build(dz, [hidden], d),
                                  K, rng, **kw)


def constant_decoder(params, outputs):
    """Decoder whose output for code ``k`` is ``outputs[k]`` (identity-free lookup)."""
    outputs = np.atleast_2d(outputs)
    dec = MlpSpec((params.codebook.dz, outputs.shape[1]))
    E = params.codebook.entries
    # solve W e_k + b = y_k exactly for K <= dz + 1 affinely independent codes
    A = np.hstack([E, np.ones((E.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(A, outputs, rcond=None)
    theta = np.concatenate([sol[:-1].T.ravel(), sol[-1]])
    return ModelParams(params.encoder, params.phi, dec, theta, params.codebook,
                       params.log_sigma2, params.log_sigma_psi2, params.beta_q)


class TestReconstructionLoss:
    """Exact posterior expectation of the squared error."""

    def test_perfect_point_mass(self):
        p = make_params(K=1)
        x = np.array([0.3, 0.6])
        p = constant_decoder(p, x)
        assert reconstruction_loss_l0(p, x, "deterministic", clamp=False) == pytest.approx(0, abs=1e-24)

    def test_single_code(self):
        p = constant_decoder(make_params(K=1), np.array([0.2, 0.9]))
        x = np.array([0.5, 0.5])
        np.testing.assert_allclose(reconstruction_loss_l0(p, x, clamp=False), 0.09 + 0.16,
                                   rtol=1e-12)

    def test_uniform_two_codes_enumeration(self):
        p = make_params(K=2)
        y = np.array([[0.1, 0.2], [0.7, 0.4]])
        p = constant_decoder(p, y)
        x = np.array([0.3, 0.3])
        got = reconstruction_losses(p, x, "stochastic", clamp=False, beta=0.0)[0]
        expected = 0.5 * ((x - y[0]) ** 2).sum() + 0.5 * ((x - y[1]) ** 2).sum()
        np.testing.assert_allclose(got, expected, rtol=1e-12)


class TestSqvaeLoss:
    """Objective values at constructed points and its analytic gradient."""

    def _perfect(self, d=2):
        enc = MlpSpec((d, 1))
        dec = MlpSpec((1, d))
        x = np.array([0.25, 0.75])
        theta = np.concatenate([np.zeros(d), x])
        cb = Codebook(np.array([[0.0], [1000.0]]))
        return ModelParams(enc, np.zeros(enc.n_params), dec, theta, cb, 0.0, 0.0), x

    def test_perfect_autoencoder_zero(self):
        p, x = self._perfect()
        loss, tape = sqvae_loss(p, x, 1.0, np.random.default_rng(0))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert tape.cache["terms"]["regularizer"] == pytest.approx(0.0, abs=1e-12)

    def test_uniform_entropy_term(self):
        p = make_params(K=4)
        p = ModelParams(p.encoder, p.phi, p.decoder, p.theta, Codebook(np.zeros((4, 2))),
                        0.0, 0.0)
        _, tape = sqvae_loss(p, np.full((3, 2), 0.5), 1.0, np.random.default_rng(1))
        assert tape.cache["terms"]["regularizer"] == pytest.approx(-math.log(4), rel=1e-12)

    @pytest.mark.parametrize("sigma2", ["learned", "mle"])
    @pytest.mark.parametrize("lambda_mix", [0.0, 0.5])
    def test_grad_check(self, sigma2, lambda_mix):
        p = make_params(K=3, seed=4)
        rng = np.random.default_rng(5)
        batch = rng.random((8, 2))
        noise = -np.log(-np.log(rng.random((8, 3))))
        prior = np.array([0.5, 0.3, 0.2])

        def f(vec):
            loss, tape = sqvae_loss(p.with_vector(vec), batch, 0.7, noise=noise, prior=prior,
                                    lambda_mix=lambda_mix, sigma2=sigma2)
            return loss, flatten_grads(tape.backward())

        vec = p.to_vector()
        coords = rng.choice(vec.size, size=min(64, vec.size), replace=False)
        assert grad_check(f, vec, coords=coords) <= 1e-4

    def test_vq_grad_on_decoder(self):
        p = make_params(K=3, seed=6)
        batch = np.random.default_rng(7).random((6, 2))
        n_phi = p.phi.size

        def f(theta):
            q = ModelParams(p.encoder, p.phi, p.decoder, theta, p.codebook)
            loss, tape = vq_loss(q, batch)
            return loss, tape.backward()["theta"]

        assert grad_check(f, p.theta.copy()) <= 1e-4 and n_phi > 0

    def test_requires_prior_when_mixing(self):
        with pytest.raises(ValueError):
            sqvae_loss(make_params(), np.zeros((1, 2)), 1.0, np.random.default_rng(0),
                       lambda_mix=0.5)


class TestRegularizers:
    """Entropy, CDVIB KL and their mixture."""

    def test_entropy_values(self):
        assert entropy_of_posteriors(np.eye(3)) == 0.0
        np.testing.assert_allclose(entropy_of_posteriors(np.full((2, 5), 0.2)), math.log(5))
        np.testing.assert_allclose(entropy_of_posteriors(np.array([[0.7, 0.2, 0.1]])), 0.80182,
                                   atol=5e-6)

    def test_cdvib(self):
        post = np.random.default_rng(0).dirichlet(np.ones(4), size=6)
        assert cdvib_regularizer(np.tile([0.1, 0.2, 0.3, 0.4], (3, 1)),
                                 np.array([0.1, 0.2, 0.3, 0.4])) == pytest.approx(0, abs=1e-15)
        np.testing.assert_allclose(cdvib_regularizer(post, np.full(4, 0.25)),
                                   math.log(4) - entropy_of_posteriors(post), rtol=1e-12)
        np.testing.assert_allclose(cdvib_regularizer(np.array([[0.75, 0.25]]),
                                                     np.array([0.5, 0.5])), 0.13081, atol=5e-6)

    def test_mixture_endpoints(self):
        rng = np.random.default_rng(1)
        post = rng.dirichlet(np.ones(3), size=5)
        prior = rng.dirichlet(np.ones(3))
        assert mixed_regularizer(post, prior, 0.0) == -entropy_of_posteriors(post)
        np.testing.assert_allclose(mixed_regularizer(post, prior, 1.0),
                                   cdvib_regularizer(post, prior), rtol=1e-14)
        with pytest.raises(ValueError):
            mixed_regularizer(post, prior, 1.5)


class TestParams:
    """Flat parameter vector round trip."""

    def test_vector_round_trip(self):
        p = make_params(K=5, log_sigma2=-1.0, log_sigma_psi2=-3.0)
        q = p.with_vector(p.to_vector())
        np.testing.assert_array_equal(q.to_vector(), p.to_vector())
        assert q.effective_beta == pytest.approx(0.5 * math.exp(3.0))
        with pytest.raises(ValueError):
            p.with_vector(np.zeros(3))

    def test_width_mismatch(self):
        enc = MlpSpec.build(2, [3], 2)
        dec = MlpSpec.build(3, [3], 2)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ModelParams(enc, init_params(enc, rng), dec, init_params(dec, rng),
                        Codebook(np.zeros((2, 2))))
