"""Encoder/decoder composition, reconstruction loss and training objectives.

Two objectives are provided:

* ``sqvae_loss``: the Gaussian stochastically-quantized VAE objective with a
  Gumbel-softmax relaxed code, optionally mixing in the moving-average prior
  regularizer (``lambda_mix > 0``).
* ``vq_loss``: the deterministic nearest-code objective trained with a
  straight-through estimator plus codebook/commitment terms.

Both return ``(loss, tape)`` where ``tape.backward()`` yields a dict of
gradients keyed like :data:`PARAM_BLOCKS`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import MlpSpec, NumericError, TapeStateError, init_params, mlp_backward, mlp_forward
from .quantizer import (
    Codebook,
    deterministic_posterior,
    gumbel_noise,
    gumbel_softmax_backward,
    quantize_straight_through,
    softmax,
    squared_distances,
    stochastic_posterior,
    vq_auxiliary_losses,
)

PARAM_BLOCKS = ("phi", "theta", "codebook", "log_sigma2", "log_sigma_psi2")
PRIOR_FLOOR = 1e-12
MODES = ("deterministic", "stochastic")
SIGMA2_MODES = ("learned", "mle")
SIGMA2_FLOOR = 1e-12


@dataclass
class ModelParams:
    encoder: MlpSpec
    phi: np.ndarray
    decoder: MlpSpec
    theta: np.ndarray
    codebook: Codebook
    log_sigma2: float = 0.0
    log_sigma_psi2: float = 0.0
    # Inverse temperature used when evaluating the stochastic posterior; None
    # means the value implied by the dequantization variance, 1 / (2 sigma_psi^2).
    beta_q: float | None = None

    def __post_init__(self):
        if self.encoder.n_out != self.codebook.dz or self.decoder.n_in != self.codebook.dz:
            raise ValueError("encoder output, codebook and decoder input widths must agree")
        if self.encoder.n_in != self.decoder.n_out:
            raise ValueError("encoder input width must equal decoder output width")

    @classmethod
    def initialize(cls, encoder: MlpSpec, decoder: MlpSpec, K: int,
                   rng: np.random.Generator, codebook_scale: float = 0.5,
                   log_sigma2: float = 0.0, log_sigma_psi2: float = 0.0) -> "ModelParams":
        phi = init_params(encoder, rng)
        theta = init_params(decoder, rng)
        entries = rng.normal(0.0, codebook_scale, size=(K, encoder.n_out))
        return cls(encoder, phi, decoder, theta, Codebook(entries), float(log_sigma2),
                   float(log_sigma_psi2))

    @property
    def d(self) -> int:
        return self.decoder.n_out

    @property
    def K(self) -> int:
        return self.codebook.K

    @property
    def effective_beta(self) -> float:
        return 0.5 * float(np.exp(-self.log_sigma_psi2))

    @property
    def eval_beta(self) -> float:
        return self.effective_beta if self.beta_q is None else float(self.beta_q)

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "phi": self.phi,
            "theta": self.theta,
            "codebook": self.codebook.entries,
            "log_sigma2": np.array([self.log_sigma2]),
            "log_sigma_psi2": np.array([self.log_sigma_psi2]),
        }

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(b) for b in self.blocks().values()])

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        out = {}
        pos = 0
        for name, block in self.blocks().items():
            n = block.size
            out[name] = vec[pos:pos + n].reshape(block.shape).copy()
            pos += n
        if pos != vec.size:
            raise ValueError(f"vector length {vec.size} != parameter count {pos}")
        return replace(
            self,
            phi=out["phi"],
            theta=out["theta"],
            codebook=Codebook(out["codebook"]),
            log_sigma2=float(out["log_sigma2"][0]),
            log_sigma_psi2=float(out["log_sigma_psi2"][0]),
        )

    def copy(self) -> "ModelParams":
        return self.with_vector(self.to_vector())


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[name]) for name in PARAM_BLOCKS])


def encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params.encoder, params.phi, x)


def decode_codes(params: ModelParams, clamp: bool = False) -> np.ndarray:
    """Decoder output for every codebook entry, shape ``(K, d)``."""
    y = mlp_forward(params.decoder, params.theta, params.codebook.entries)
    return np.clip(y, 0.0, 1.0) if clamp else y


def posteriors(params: ModelParams, x: np.ndarray, mode: str = "stochastic",
               beta: float | None = None) -> np.ndarray:
    """Index posterior rows ``q(J | e, phi, x)`` for a batch of inputs."""
    z = encode(params, np.atleast_2d(x))
    if mode == "deterministic":
        return deterministic_posterior(z, params.codebook)
    if mode == "stochastic":
        b = params.eval_beta if beta is None else beta
        return stochastic_posterior(z, params.codebook, b)
    raise ValueError(f"unknown mode {mode!r}")


def reconstruction_losses(params: ModelParams, x: np.ndarray, mode: str = "stochastic",
                          clamp: bool = True, beta: float | None = None) -> np.ndarray:
    """Per-point ``l_0``: the exact posterior expectation of ``||x - g(e_J)||^2``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = posteriors(params, x, mode, beta)
    y = decode_codes(params, clamp=clamp)
    sq = squared_distances(x, y)
    return (q * sq).sum(axis=1)


def reconstruction_loss_l0(params: ModelParams, x: np.ndarray, mode: str = "stochastic",
                           clamp: bool = True) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(reconstruction_losses(params, x, mode, clamp)[0]) if x.ndim == 1 \
        else float(reconstruction_losses(params, x, mode, clamp).mean())


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy_of_posteriors(post: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the posterior rows."""
    post = np.atleast_2d(post)
    return float(-_xlogx(post).sum(axis=1).mean())


def check_prior(prior: np.ndarray) -> np.ndarray:
    prior = np.asarray(prior, dtype=np.float64)
    if np.any(prior < PRIOR_FLOOR):
        raise ValueError(f"prior entries must be >= {PRIOR_FLOOR}")
    return prior


def cdvib_regularizer(post: np.ndarray, prior: np.ndarray) -> float:
    """Mean per-row ``KL(q_n || prior)`` in nats."""
    prior = check_prior(prior)
    post = np.atleast_2d(post)
    return float((_xlogx(post) - post * np.log(prior)).sum(axis=1).mean())


def mixed_regularizer(post: np.ndarray, prior: np.ndarray, lambda_mix: float = 0.5) -> float:
    """``(1 - lambda_mix) * (-entropy) + lambda_mix * KL_CDVIB``."""
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError("lambda_mix must lie in [0, 1]")
    neg_h = -entropy_of_posteriors(post)
    if lambda_mix == 0.0:
        return neg_h
    return (1.0 - lambda_mix) * neg_h + lambda_mix * cdvib_regularizer(post, prior)


@dataclass
class LossTape:
    """Cached intermediates of one objective evaluation; backward is one-shot."""

    kind: str
    cache: dict = field(default_factory=dict)
    consumed: bool = False

    def backward(self) -> dict[str, np.ndarray]:
        if self.consumed:
            raise TapeStateError("loss tape already consumed")
        self.consumed = True
        if self.kind == "sqvae":
            return _sqvae_backward(self.cache)
        return _vq_backward(self.cache)


def _require_finite(terms: dict[str, float]):
    for name, val in terms.items():
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss term: {name} = {val}")


def sqvae_loss(params: ModelParams, batch: np.ndarray, tau: float,
               rng: np.random.Generator | None = None, *, noise: np.ndarray | None = None,
               prior: np.ndarray | None = None, lambda_mix: float = 0.0,
               sigma2: str = "learned"):
    """Gaussian SQ-VAE objective averaged over the batch.

    Per sample::

        d/2 log s2 + ||x - g(z_hat)||^2 / (2 s2)
            + sum_k q_k ||f(x) - e_k||^2 / (2 s_psi2) + R(q)

    with ``q = softmax(-||f(x) - e||^2 / (2 s_psi2))``, ``z_hat`` the
    Gumbel-softmax mixture of codes and ``R`` the mixed entropy/prior
    regularizer (plain negative entropy when ``lambda_mix == 0``).
    With ``sigma2="mle"`` the observation variance is the batch maximum
    likelihood value ``mean ||x - g(z_hat)||^2 / d`` instead of
    ``exp(log_sigma2)``; the loss is then the profile over ``s2`` and its
    gradient needs no term through ``s2``.
    Returns ``(loss, tape)``; ``tape.cache['terms']`` holds the batch-mean terms.
    """
    if sigma2 not in SIGMA2_MODES:
        raise ValueError(f"unknown sigma2 mode {sigma2!r}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    B, d = x.shape
    E = params.codebook.entries
    K = E.shape[0]
    if lambda_mix > 0:
        if prior is None:
            raise ValueError("lambda_mix > 0 requires a prior")
        log_prior = np.log(check_prior(prior))
    else:
        log_prior = None

    z, enc_tape = mlp_forward(params.encoder, params.phi, x, record=True)
    beta = 0.5 * np.exp(-params.log_sigma_psi2)
    D = squared_distances(z, E)
    logits = -beta * D
    q = softmax(logits)
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or a noise array")
        noise = gumbel_noise((B, K), rng)
    y = softmax((logits + noise) / tau)
    z_hat = y @ E
    x_hat, dec_tape = mlp_forward(params.decoder, params.theta, z_hat, record=True)
    r = x - x_hat
    sq_err = (r * r).sum(axis=1)
    if sigma2 == "mle":
        s2 = max(float(sq_err.mean()) / d, SIGMA2_FLOOR)
        log_s2 = float(np.log(s2))
    else:
        log_s2 = params.log_sigma2
        s2 = np.exp(log_s2)

    logq = np.log(np.clip(q, 1e-300, None))
    neg_entropy = (q * logq).sum(axis=1)
    recon = 0.5 * d * log_s2 + sq_err / (2.0 * s2)
    quant = beta * (q * D).sum(axis=1)
    if log_prior is None:
        reg = neg_entropy
    else:
        kl_prior = neg_entropy - q @ log_prior
        reg = (1.0 - lambda_mix) * neg_entropy + lambda_mix * kl_prior
    per_sample = recon + quant + reg
    terms = {
        "reconstruction": float(recon.mean()),
        "quantization": float(quant.mean()),
        "regularizer": float(reg.mean()),
    }
    _require_finite(terms)
    loss = float(per_sample.mean())
    cache = dict(
        x=x, z=z, E=E, D=D, beta=beta, q=q, y=y, tau=tau, r=r, s2=s2, sq_err=sq_err,
        enc_tape=enc_tape, dec_tape=dec_tape, log_prior=log_prior, lambda_mix=lambda_mix,
        terms=terms, d=d, sigma2=sigma2,
    )
    return loss, LossTape("sqvae", cache)


def _sqvae_backward(c: dict) -> dict[str, np.ndarray]:
    x, z, E, D, q, y = c["x"], c["z"], c["E"], c["D"], c["q"], c["y"]
    beta, tau, r, s2, d = c["beta"], c["tau"], c["r"], c["s2"], c["d"]
    B = x.shape[0]

    if c["sigma2"] == "mle":
        g_log_s2 = 0.0
    else:
        g_log_s2 = np.sum(0.5 * d - c["sq_err"] / (2.0 * s2)) / B
    g_xhat = -r / s2 / B
    g_theta, g_zhat = mlp_backward(c["dec_tape"], g_xhat)
    g_E = y.T @ g_zhat
    g_y = g_zhat @ E.T
    g_logits = gumbel_softmax_backward(y, g_y, tau)

    # quantization + regularizer == -logsumexp(logits) - lambda_mix <q, log prior>
    g_logits = g_logits - q / B
    if c["log_prior"] is not None:
        w = c["log_prior"]
        centered = w - (q @ w)[:, None]
        g_logits = g_logits - c["lambda_mix"] * q * centered / B

    g_D = -beta * g_logits
    g_beta = -np.sum(g_logits * D)
    g_log_spsi2 = -beta * g_beta
    row = g_D.sum(axis=1)
    g_z = 2.0 * (z * row[:, None] - g_D @ E)
    col = g_D.sum(axis=0)
    g_E = g_E + 2.0 * (E * col[:, None] - g_D.T @ z)
    g_phi, _ = mlp_backward(c["enc_tape"], g_z)
    return {
        "phi": g_phi,
        "theta": g_theta,
        "codebook": g_E,
        "log_sigma2": np.array([g_log_s2]),
        "log_sigma_psi2": np.array([g_log_spsi2]),
    }


def vq_loss(params: ModelParams, batch: np.ndarray, commitment: float = 0.25):
    """Deterministic VQ objective: squared reconstruction + codebook + commitment.

    The decoder sees the nearest code; its input gradient is copied to the
    encoder output (straight-through).
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    B = x.shape[0]
    z, enc_tape = mlp_forward(params.encoder, params.phi, x, record=True)
    codes, idx = quantize_straight_through(z, params.codebook)
    x_hat, dec_tape = mlp_forward(params.decoder, params.theta, codes, record=True)
    r = x - x_hat
    recon = float((r * r).sum(axis=1).mean())
    cb_loss, commit_loss, g_codes, g_z_aux = vq_auxiliary_losses(z, codes, commitment)
    terms = {"reconstruction": recon, "codebook": cb_loss, "commitment": commit_loss}
    _require_finite(terms)
    cache = dict(r=r, B=B, idx=idx, K=params.K, enc_tape=enc_tape, dec_tape=dec_tape,
                 g_codes=g_codes, g_z_aux=g_z_aux, terms=terms)
    return recon + cb_loss + commit_loss, LossTape("vq", cache)


def _vq_backward(c: dict) -> dict[str, np.ndarray]:
    g_xhat = -2.0 * c["r"] / c["B"]
    g_theta, g_code_in = mlp_backward(c["dec_tape"], g_xhat)
    g_z = g_code_in + c["g_z_aux"]
    g_phi, _ = mlp_backward(c["enc_tape"], g_z)
    g_E = np.zeros((c["K"], g_code_in.shape[1]))
    np.add.at(g_E, c["idx"], c["g_codes"])
    return {
        "phi": g_phi,
        "theta": g_theta,
        "codebook": g_E,
        "log_sigma2": np.zeros(1),
        "log_sigma_psi2": np.zeros(1),
    }


def objective(params: ModelParams, batch: np.ndarray, mode: str, tau: float = 1.0,
              rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
              prior: np.ndarray | None = None, lambda_mix: float = 0.0,
              sigma2: str = "learned"):
    """Dispatch to the training objective of a trainer mode."""
    if mode == "sq_stochastic":
        return sqvae_loss(params, batch, tau, rng, noise=noise, prior=prior,
                          lambda_mix=lambda_mix, sigma2=sigma2)
    if mode == "vq_deterministic":
        return vq_loss(params, batch)
    raise ValueError(f"unknown training mode {mode!r}")


def eval_mode(train_mode: str) -> str:
    """Posterior type used to evaluate models trained in ``train_mode``."""
    return "deterministic" if train_mode == "vq_deterministic" else "stochastic"
