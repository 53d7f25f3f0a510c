"""Training loop: Adam, temperature annealing, lr halving and the EMA index prior."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import MlpSpec, NumericError
from .model import (PARAM_BLOCKS, PRIOR_FLOOR, SIGMA2_MODES, ModelParams, encode, eval_mode, objective,
                    posteriors, reconstruction_losses)
from .quantizer import Codebook

DIVERGENCE_LIMIT = 1e12
TRAIN_MODES = ("sq_stochastic", "vq_deterministic")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_halve_patience_epochs: int = 3
    anneal_rate: float = 1e-5
    alpha_ema: float = 0.9
    lambda_mix: float = 0.0
    mode: str = "sq_stochastic"
    seed: int = 0
    sigma2: str = "learned"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_halve_patience_epochs < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 required")
        for name in ("lr", "anneal_rate", "alpha_ema", "lambda_mix"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.lr <= 0 or self.anneal_rate < 0:
            raise ValueError("lr must be positive and anneal_rate non-negative")
        if not 0.0 <= self.alpha_ema <= 1.0 or not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError("alpha_ema and lambda_mix must lie in [0, 1]")
        if self.sigma2 not in SIGMA2_MODES:
            raise ValueError(f"unknown sigma2 mode {self.sigma2!r}")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class Architecture:
    encoder: MlpSpec
    decoder: MlpSpec
    K: int
    codebook_scale: float = 0.5
    log_sigma2_init: float = 0.0
    log_sigma_psi2_init: float = 0.0
    # "random": N(0, codebook_scale^2) entries; "data": encoder outputs at K
    # training points; "box": encoder outputs at K uniform points of the unit
    # box, which keeps the initial codes independent of the training data.
    codebook_init: str = "random"

    @classmethod
    def mlp(cls, d: int, dz: int, K: int, hidden: int = 16, enc_depth: int = 1,
            dec_depth: int = 2, activation: str = "tanh") -> "Architecture":
        """Encoder ``d -> dz`` and decoder ``dz -> d`` with ``*_depth`` hidden layers."""
        enc = MlpSpec.build(d, [hidden] * enc_depth, dz, activation)
        dec = MlpSpec.build(dz, [hidden] * dec_depth, d, activation)
        return cls(enc, dec, K)


@dataclass
class TrainHistory:
    """Per-epoch record. ``train_loss`` and ``val_loss`` are mean ``l_0``
    reconstruction losses under the evaluation posterior; ``objective`` is the
    mean training objective over the epoch's batches."""

    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    prior: list = field(default_factory=list)
    initial_train_loss: float = float("nan")

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, train_loss, val_loss, tau, lr, obj, prior):
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.tau.append(float(tau))
        self.lr.append(float(lr))
        self.objective.append(float(obj))
        self.prior.append(np.array(prior, dtype=np.float64))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_loss,tau,lr\n")
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.tau, self.lr):
            buf.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}\n")
        return buf.getvalue()

    def same_as(self, other: "TrainHistory") -> bool:
        scalars = ("epoch", "train_loss", "val_loss", "tau", "lr", "objective")
        if any(getattr(self, s) != getattr(other, s) for s in scalars):
            return False
        return len(self.prior) == len(other.prior) and all(
            np.array_equal(a, b) for a, b in zip(self.prior, other.prior))


class TrainingDiverged(NumericError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, blocks: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(b, dtype=np.float64) for k, b in blocks.items()},
                   {k: np.zeros_like(b, dtype=np.float64) for k, b in blocks.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to every block in ``params``."""
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(params[name]):
            raise ValueError(f"gradient shape mismatch in block {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def anneal_temperature(step: int, rate: float = 1e-5) -> float:
    """Gumbel-softmax temperature ``exp(-rate * step)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return math.exp(-rate * step)


def update_prior_ema(pi: np.ndarray, batch_post: np.ndarray, alpha: float = 0.9) -> np.ndarray:
    """``(1 - alpha) pi + alpha * mean(batch_post)``, renormalized and floored.

    The floor is applied as ``p (1 - K eps) + eps`` so every entry stays at or
    above ``eps`` while the total mass remains one.
    """
    pi = np.asarray(pi, dtype=np.float64)
    p_hat = np.atleast_2d(batch_post).mean(axis=0)
    out = np.maximum((1.0 - alpha) * pi + alpha * p_hat, 0.0)
    out = out / out.sum()
    return out * (1.0 - out.size * PRIOR_FLOOR) + PRIOR_FLOOR


def _as_points(dataset) -> np.ndarray:
    pts = getattr(dataset, "points", dataset)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("dataset is empty")
    return pts


def _param_blocks(p: ModelParams) -> dict[str, np.ndarray]:
    return {
        "phi": p.phi.copy(),
        "theta": p.theta.copy(),
        "codebook": p.codebook.entries.copy(),
        "log_sigma2": np.array([p.log_sigma2]),
        "log_sigma_psi2": np.array([p.log_sigma_psi2]),
    }


def _from_blocks(template: ModelParams, blocks: dict[str, np.ndarray]) -> ModelParams:
    vec = np.concatenate([np.ravel(blocks[k]) for k in PARAM_BLOCKS])
    return template.with_vector(vec)


def init_codebook_from_data(params: ModelParams, x: np.ndarray,
                            rng: np.random.Generator) -> ModelParams:
    """Place the codes at encoder outputs of randomly chosen training points."""
    K = params.K
    pick = rng.choice(x.shape[0], size=K, replace=K > x.shape[0])
    z = encode(params, x[pick])
    jitter = 1e-3 * max(float(np.std(z)), 1e-3)
    entries = z + jitter * rng.standard_normal(z.shape)
    return replace(params, codebook=Codebook(entries))


def train(config: TrainConfig, dataset, arch: Architecture,
          rng: np.random.Generator | None = None, val=None):
    """Fit a model; returns ``(params, prior, history)``.

    Validation loss drives lr halving and is measured on ``val`` when given,
    otherwise on the training set itself so the algorithm sees only its
    training data. ``rng`` defaults to ``default_rng(config.seed)``.
    """
    x = _as_points(dataset)
    n, d = x.shape
    if arch.encoder.n_in != d or arch.decoder.n_out != d:
        raise ValueError(f"architecture widths do not match data dimension {d}")
    if config.batch_size > n:
        config = replace(config, batch_size=n)
    x_val = x if val is None else _as_points(val)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    emode = eval_mode(config.mode)

    params = ModelParams.initialize(arch.encoder, arch.decoder, arch.K, rng,
                                    arch.codebook_scale, arch.log_sigma2_init,
                                    arch.log_sigma_psi2_init)
    if arch.codebook_init == "data":
        params = init_codebook_from_data(params, x, rng)
    elif arch.codebook_init == "box":
        params = init_codebook_from_data(params, rng.random((arch.K, d)), rng)
    elif arch.codebook_init != "random":
        raise ValueError(f"unknown codebook_init {arch.codebook_init!r}")
    prior = np.full(arch.K, 1.0 / arch.K)
    history = TrainHistory()
    history.initial_train_loss = float(reconstruction_losses(params, x, emode).mean())
    blocks = _param_blocks(params)
    state = AdamState.zeros_like(blocks)
    lr = config.lr
    best_val = math.inf
    stale = 0
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = x[order[start:start + config.batch_size]]
            tau = anneal_temperature(step, config.anneal_rate)
            loss, tape = objective(params, batch, config.mode, tau, rng, prior=prior,
                                   lambda_mix=config.lambda_mix, sigma2=config.sigma2)
            if not math.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {loss!r} at epoch {epoch}, step {step}", history)
            grads = tape.backward()
            if config.lambda_mix > 0:
                q = tape.cache["q"] if "q" in tape.cache else posteriors(params, batch, emode)
                prior = update_prior_ema(prior, q, config.alpha_ema)
            adam_step(blocks, grads, state, lr)
            params = _from_blocks(params, blocks)
            total += loss * batch.shape[0]
            count += batch.shape[0]
            step += 1

        train_l0 = float(reconstruction_losses(params, x, emode).mean())
        val_l0 = train_l0 if val is None else float(reconstruction_losses(params, x_val, emode).mean())
        history.append(epoch, train_l0, val_l0, anneal_temperature(step, config.anneal_rate),
                       lr, total / count, prior)
        if not math.isfinite(train_l0):
            raise TrainingDiverged(f"non-finite train loss at epoch {epoch}", history)
        if val_l0 < best_val:
            best_val = val_l0
            stale = 0
        else:
            stale += 1
            if stale >= config.lr_halve_patience_epochs:
                lr *= 0.5
                stale = 0
    return params, prior, history
