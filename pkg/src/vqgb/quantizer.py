"""Codebook lookup, index posteriors and the Gumbel-softmax relaxation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GUMBEL_CLAMP = 1e-12


@dataclass
class Codebook:
    """``K`` latent vectors of dimension ``dz``, stored as a ``(K, dz)`` array."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError(f"codebook must be a non-empty (K, dz) array, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        self.entries = e

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def dz(self) -> int:
        return self.entries.shape[1]

    def latent_diameter(self, extra: np.ndarray | None = None) -> float:
        """Max pairwise Euclidean distance among the entries (and ``extra`` points)."""
        pts = self.entries if extra is None else np.vstack([self.entries, extra])
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1).max()))


def squared_distances(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """``||z_b - e_k||^2`` for a batch ``(B, dz)`` (or one vector) against ``(K, dz)``."""
    z = np.asarray(z, dtype=np.float64)
    diff = z[..., None, :] - entries
    return np.einsum("...kd,...kd->...k", diff, diff)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def nearest_index(z: np.ndarray, cb: Codebook) -> np.ndarray:
    """Index of the nearest codebook entry; ties resolve to the lowest index."""
    return np.argmin(squared_distances(z, cb.entries), axis=-1)


def deterministic_posterior(z: np.ndarray, cb: Codebook) -> np.ndarray:
    """One-hot posterior at the nearest codebook entry."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cb.dz:
        raise ValueError(f"latent width {z.shape[-1]} != codebook width {cb.dz}")
    idx = nearest_index(z, cb)
    return np.eye(cb.K)[idx]


def stochastic_posterior(z: np.ndarray, cb: Codebook, beta: float) -> np.ndarray:
    """Softmax posterior ``p_k ∝ exp(-beta ||z - e_k||^2)``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cb.dz:
        raise ValueError(f"latent width {z.shape[-1]} != codebook width {cb.dz}")
    return softmax(-beta * squared_distances(z, cb.entries))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits: np.ndarray, tau: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> np.ndarray:
    """Relaxed one-hot sample ``softmax((logits + G) / tau)``.

    Pass ``noise`` to reuse a fixed Gumbel draw (e.g. for gradient checks).
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or a noise array")
        noise = gumbel_noise(logits.shape, rng)
    return softmax((logits + noise) / tau)


def gumbel_softmax_backward(sample: np.ndarray, upstream: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. the logits given the gradient w.r.t. the relaxed sample."""
    inner = (upstream * sample).sum(axis=-1, keepdims=True)
    return sample * (upstream - inner) / tau


def quantize_straight_through(z: np.ndarray, cb: Codebook):
    """Nearest-code quantization with an identity backward rule.

    Returns ``(codes, indices)``. The code vectors are the forward values;
    gradients arriving at the codes are passed to ``z`` unchanged by the
    caller (see :func:`straight_through_backward`).
    """
    idx = nearest_index(z, cb)
    return cb.entries[idx].copy(), idx


def straight_through_backward(upstream: np.ndarray) -> np.ndarray:
    return np.asarray(upstream, dtype=np.float64)


def vq_auxiliary_losses(z: np.ndarray, codes: np.ndarray, commitment: float = 0.25):
    """Codebook and commitment losses with their gradients.

    Returns ``(codebook_loss, commitment_loss, grad_codes, grad_z)`` for
    ``||stop(z) - e||^2`` and ``commitment * ||z - stop(e)||^2`` summed per
    row and averaged over the batch.
    """
    z = np.atleast_2d(z)
    codes = np.atleast_2d(codes)
    diff = z - codes
    B = z.shape[0]
    sq = (diff ** 2).sum(axis=1)
    cb_loss = float(sq.mean())
    commit_loss = float(commitment * sq.mean())
    grad_codes = -2.0 * diff / B
    grad_z = 2.0 * commitment * diff / B
    return cb_loss, commit_loss, grad_codes, grad_z
