"""KL divergences between index distributions and mutual-information estimators."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from . import kernels

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class CmiProtocolConfig:
    num_u_draws: int = 5
    knn_k: int = 3
    pooling: str = "per_seed"
    feature: str = "loss"

    def __post_init__(self):
        if self.num_u_draws < 2:
            raise ValueError("num_u_draws must be at least 2")
        if self.knn_k < 1:
            raise ValueError("knn_k must be at least 1")
        if self.pooling not in ("per_seed", "pooled"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.feature not in ("loss", "index"):
            raise ValueError(f"unknown feature {self.feature!r}")


@dataclass
class MiSampleSet:
    """Paired samples ``(feature, label)``; features may be symbols or real vectors."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels)
        if len(self.features) == 0 or len(self.features) != len(self.labels):
            raise ValueError("need a non-empty, equal number of features and labels")


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p || q)`` in nats.

    Returns ``math.inf`` when ``q`` falls below the floor where ``p`` carries at
    least floor-level mass, or vanishes anywhere on ``p``'s support. Entries
    where both are below the floor contribute their exact (negligible) value.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(support & (q <= 0)) or np.any((p >= KL_FLOOR) & (q < KL_FLOOR)):
        return math.inf
    ps = p[support]
    return float(max(0.0, np.sum(ps * (np.log(ps) - np.log(q[support])))))


def row_kls(posteriors: np.ndarray, prior: np.ndarray) -> np.ndarray:
    posteriors = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    return np.array([categorical_kl(row, prior) for row in posteriors])


def empirical_kl_term(posteriors: np.ndarray, prior: np.ndarray) -> float:
    """Mean over training rows of ``KL(q(J | x_m) || prior)``."""
    return float(np.mean(row_kls(posteriors, prior)))


def marginal_prior(posteriors: np.ndarray) -> np.ndarray:
    """Column mean of the posterior rows: the KL-minimizing product prior.

    Entries are lifted to the KL floor as ``p (1 - K eps) + eps`` so that the
    result is always a valid prior; the shift is at most ``K eps``.
    """
    posteriors = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if posteriors.shape[0] == 0:
        raise ValueError("need at least one posterior row")
    p = posteriors.mean(axis=0)
    p = p / p.sum()
    return p * (1.0 - p.size * KL_FLOOR) + KL_FLOOR


def uniform_prior(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def _encode_symbols(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim > 1:
        a = a.reshape(len(a), -1)
        _, inv = np.unique(a, axis=0, return_inverse=True)
    else:
        _, inv = np.unique(a, return_inverse=True)
    return inv.ravel()


def plugin_discrete_mi(features, labels=None) -> float:
    """Plug-in mutual information (nats) between two discrete sequences.

    Accepts either a :class:`MiSampleSet` or two equal-length arrays. Rows of
    a 2-D feature array are treated as single symbols.
    """
    if isinstance(features, MiSampleSet):
        features, labels = features.features, features.labels
    a = _encode_symbols(features)
    b = _encode_symbols(labels)
    if a.size != b.size:
        raise ValueError("features and labels differ in length")
    n = a.size
    na, nb = a.max() + 1, b.max() + 1
    joint = np.bincount(a * nb + b, minlength=na * nb).reshape(na, nb) / n
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz]))
    return float(max(0.0, mi))


def knn_mi(features, labels=None, k: int = 3, rng: np.random.Generator | None = None,
           clamp: bool = True) -> float:
    """Nearest-neighbor MI between continuous features and a discrete label.

    For each point the max-norm distance ``r`` to its ``k``-th neighbor with
    the same label is found, and ``m`` counts all points within ``r``::

        I = psi(N) + <psi(k)> - <psi(N_label)> - <psi(m)>

    Points whose label occurs once are ignored; ``k`` is capped at
    ``N_label - 1``. Exactly duplicated feature rows are jittered at 1e-10
    scale with a warning.
    """
    if isinstance(features, MiSampleSet):
        features, labels = features.features, features.labels
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    y = _encode_symbols(labels)
    if len(y) != len(x):
        raise ValueError("features and labels differ in length")
    if k < 1:
        raise ValueError("k must be at least 1")

    if np.unique(x, axis=0).shape[0] < x.shape[0]:
        warnings.warn("duplicated feature rows; applying 1e-10 jitter", RuntimeWarning,
                      stacklevel=2)
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = max(1.0, float(np.mean(np.abs(x))))
        x = x + 1e-10 * scale * rng.standard_normal(x.shape)

    counts = np.bincount(y)
    label_counts = counts[y]
    keep = label_counts > 1
    x, y, label_counts = x[keep], y[keep], label_counts[keep]
    n = x.shape[0]
    if n == 0:
        return 0.0
    kvec = np.minimum(k, label_counts - 1).astype(np.int64)
    _, m = kernels.knn_radius_counts(np.ascontiguousarray(x), y.astype(np.int64), kvec)
    mi = digamma(n) + np.mean(digamma(kvec)) - np.mean(digamma(label_counts)) \
        - np.mean(digamma(m))
    return float(max(0.0, mi)) if clamp else float(mi)


CMI_RECORD_COLUMNS = ("n", "K", "seed", "u_draw", "row", "j_index", "u_bit",
                      "test_loss_row", "train_loss_row")


@dataclass
class CmiEstimate:
    """Per-sample CMI estimate plus the per-row records it was computed from.

    ``records`` has one row per (U draw, supersample row) with the columns of
    :data:`CMI_RECORD_COLUMNS`. ``j_index`` encodes the selected index pair of
    the row as ``j0 * K + j1``.
    """

    value: float
    pooling: str
    records: np.ndarray

    def to_csv(self) -> str:
        lines = [",".join(CMI_RECORD_COLUMNS)]
        for r in self.records:
            lines.append(",".join([*(str(int(v)) for v in r[:7]), repr(float(r[7])),
                                   repr(float(r[8]))]))
        return "\n".join(lines) + "\n"


def draw_seeds(seed: int, u_draw: int, pooling: str) -> tuple[int, int]:
    """``(u_seed, train_seed)`` for one replica; ``per_seed`` shares the train seed."""
    ss = np.random.SeedSequence([seed, u_draw, 0x5EED])
    u_seed = int(ss.generate_state(1)[0])
    if pooling == "per_seed":
        train_seed = int(np.random.SeedSequence([seed, 0x7A1]).generate_state(1)[0])
    else:
        train_seed = int(np.random.SeedSequence([seed, u_draw, 0x7A1]).generate_state(1)[0])
    return u_seed, train_seed


def records_from_params(params, ss, u, mode: str = "stochastic", seed: int = 0,
                        u_draw: int = 0) -> np.ndarray:
    """One CMI record per supersample row for a model trained on ``split_by_u(ss, u)``."""
    from .model import posteriors, reconstruction_losses
    from .resampling import split_by_u

    train_pts, test_pts = split_by_u(ss, u)
    K = params.K
    j = np.stack([posteriors(params, ss.pairs[:, c], mode).argmax(axis=1) for c in (0, 1)],
                 axis=1)
    tr = reconstruction_losses(params, train_pts, mode, clamp=True)
    te = reconstruction_losses(params, test_pts, mode, clamp=True)
    rows = np.arange(ss.n)
    return np.column_stack([
        np.full(ss.n, ss.n), np.full(ss.n, K), np.full(ss.n, seed), np.full(ss.n, u_draw),
        rows, j[:, 0] * K + j[:, 1], u, te, tr,
    ]).astype(np.float64)


def replica_records(config, arch, ss, u, train_seed: int, seed: int = 0, u_draw: int = 0,
                    train_fn=None) -> np.ndarray:
    """Train on ``split_by_u(ss, u)`` and emit one CMI record per supersample row."""
    from dataclasses import replace

    from .model import eval_mode
    from .resampling import split_by_u
    from .trainer import train

    train_fn = train if train_fn is None else train_fn
    train_pts, _ = split_by_u(ss, u)
    cfg = replace(config, seed=train_seed)
    params, _, _ = train_fn(cfg, train_pts, arch, np.random.default_rng(train_seed))
    return records_from_params(params, ss, u, eval_mode(cfg.mode), seed, u_draw)


class CmiReplicaError(RuntimeError):
    """A retraining replica failed; ``records`` holds those that completed."""

    def __init__(self, message: str, records: np.ndarray):
        super().__init__(message)
        self.records = records


def aggregate_cmi(records: np.ndarray, feature: str = "loss", knn_k: int = 3) -> float:
    """Per-sample CMI from stacked replica records.

    ``index``: plug-in MI between the row's index-pair symbol and ``U_m``,
    computed per row across draws and averaged over rows. ``loss``: k-NN MI
    between ``l(X~_{m,1}) - l(X~_{m,0})`` and ``U_m`` pooled over rows and draws.
    """
    rec = np.asarray(records, dtype=np.float64)
    u = rec[:, 6].astype(np.int64)
    if feature == "index":
        rows = rec[:, 4].astype(np.int64)
        sym = rec[:, 5].astype(np.int64)
        vals = [plugin_discrete_mi(sym[rows == r], u[rows == r]) for r in np.unique(rows)]
        return float(np.mean(vals))
    # loss difference l(X~_{m,1}) - l(X~_{m,0}) from the train/test roles
    diff = np.where(u == 1, rec[:, 8] - rec[:, 7], rec[:, 7] - rec[:, 8])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return knn_mi(diff, u, k=knn_k)


def estimate_cmi_term(config, ss, protocol: CmiProtocolConfig | None = None, arch=None,
                      seed: int = 0, jobs: int = 1, train_fn=None) -> CmiEstimate:
    """Estimate ``I(J~; U | e, phi, X~)`` per supersample row.

    Each of ``protocol.num_u_draws`` replicas draws ``U``, retrains on the
    selected half and records, per row, the pair of selected indices, ``U_m``
    and both losses. ``per_seed`` keeps the training seed fixed across draws
    so that only ``U`` varies; ``pooled`` retrains with a fresh seed per
    draw. ``protocol.feature`` picks the estimator (see :func:`aggregate_cmi`).
    """
    from .resampling import sample_u

    protocol = CmiProtocolConfig() if protocol is None else protocol
    if arch is None:
        raise ValueError("an architecture is required")
    jobs_args = []
    for d in range(protocol.num_u_draws):
        u_seed, train_seed = draw_seeds(seed, d, protocol.pooling)
        jobs_args.append((config, arch, ss, sample_u(ss.n, u_seed), train_seed, seed, d,
                          train_fn))
    parts = []
    try:
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for part in pool.map(_replica_star, jobs_args):
                    parts.append(part)
        else:
            for a in jobs_args:
                parts.append(_replica_star(a))
    except Exception as exc:
        done = np.vstack(parts) if parts else np.empty((0, len(CMI_RECORD_COLUMNS)))
        raise CmiReplicaError(f"replica {len(parts)} failed: {exc}", done) from exc
    records = np.vstack(parts)
    return CmiEstimate(aggregate_cmi(records, protocol.feature, protocol.knn_k),
                       protocol.pooling, records)


def _replica_star(args):
    return replica_records(*args)
