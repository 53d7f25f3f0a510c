"""Supersample and permutation resampling protocols and the generalization gap."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .datasets import require_boxed
from .model import ModelParams, posteriors, reconstruction_losses

MAX_BRUTEFORCE_POINTS = 8
MAX_JOINT_ENTRIES = 1 << 20


@dataclass
class Supersample:
    """``n x 2`` table of data points: ``pairs[m, c]`` is ``X~_{m,c}``."""

    pairs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3 or p.shape[1] != 2 or p.shape[0] == 0:
            raise ValueError("pairs must have shape (n, 2, dim)")
        self.pairs = require_boxed(p)

    @property
    def n(self) -> int:
        return self.pairs.shape[0]

    @property
    def dim(self) -> int:
        return self.pairs.shape[2]

    def flat(self) -> np.ndarray:
        """All ``2n`` points, row-major (``X~_{0,0}, X~_{0,1}, X~_{1,0}, ...``)."""
        return self.pairs.reshape(-1, self.dim)


def make_supersample(points, rng: np.random.Generator | int | None = None) -> Supersample:
    """Randomly pair ``2n`` points into ``n`` rows; each point is used once."""
    pts = np.atleast_2d(np.asarray(getattr(points, "points", points), dtype=np.float64))
    if pts.shape[0] == 0 or pts.shape[0] % 2:
        raise ValueError(f"need an even, positive number of points, got {pts.shape[0]}")
    rng = np.random.default_rng(rng)
    order = rng.permutation(pts.shape[0])
    return Supersample(pts[order].reshape(-1, 2, pts.shape[1]))


def sample_u(n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    return np.random.default_rng(rng).integers(0, 2, size=n, dtype=np.int64)


def _check_u(ss: Supersample, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64).ravel()
    if u.size != ss.n:
        raise ValueError(f"u has length {u.size}, supersample has {ss.n} rows")
    if np.any((u != 0) & (u != 1)):
        raise ValueError("u must be a 0/1 vector")
    return u


def split_by_u(ss: Supersample, u) -> tuple[np.ndarray, np.ndarray]:
    """``train_m = X~_{m,u_m}``, ``test_m = X~_{m,1-u_m}``."""
    u = _check_u(ss, u)
    rows = np.arange(ss.n)
    return ss.pairs[rows, u].copy(), ss.pairs[rows, 1 - u].copy()


@dataclass(frozen=True)
class PermutationSplit:
    """Uniform permutation of ``[2n]``; the first ``n`` positions are the test half."""

    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if p.size % 2 or not np.array_equal(np.sort(p), np.arange(p.size)):
            raise ValueError("perm must be a bijection on an even-sized range")
        object.__setattr__(self, "perm", p)

    @property
    def n(self) -> int:
        return self.perm.size // 2

    @property
    def test_half(self) -> np.ndarray:
        return self.perm[:self.n]

    @property
    def train_half(self) -> np.ndarray:
        return self.perm[self.n:]

    def split(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(train, test)`` rows of ``points`` selected by this split."""
        pts = np.asarray(points)
        return pts[self.train_half], pts[self.test_half]


def sample_permutation(two_n: int, rng: np.random.Generator | int | None = None) -> PermutationSplit:
    if two_n <= 0 or two_n % 2:
        raise ValueError("two_n must be a positive even count")
    return PermutationSplit(np.random.default_rng(rng).permutation(two_n))


@dataclass(frozen=True)
class GapResult:
    train_loss: float
    test_loss: float

    @property
    def signed(self) -> float:
        return self.test_loss - self.train_loss

    @property
    def gap(self) -> float:
        return abs(self.signed)


def gap_details(params: ModelParams, ss: Supersample, u, mode: str = "stochastic",
                test_points: np.ndarray | None = None) -> GapResult:
    """Train and test mean ``l_0`` with box-clamped decoder outputs.

    The test loss uses the held-out half of the supersample unless
    ``test_points`` (for example a fresh sample from the generator) is given.
    """
    train, test = split_by_u(ss, u)
    if test_points is not None:
        test = require_boxed(np.atleast_2d(test_points))
    tr = float(reconstruction_losses(params, train, mode, clamp=True).mean())
    te = float(reconstruction_losses(params, test, mode, clamp=True).mean())
    return GapResult(tr, te)


def estimate_gap(params: ModelParams, ss: Supersample, u, mode: str = "stochastic") -> float:
    """``|mean_test l_0 - mean_train l_0|`` on the supersample split ``u``."""
    return gap_details(params, ss, u, mode).gap


@dataclass
class PermutationPrior:
    slot_marginals: np.ndarray
    joint: np.ndarray | None = None

    @property
    def max_slot_tv(self) -> float:
        """Largest total-variation distance between any two slot marginals."""
        m = self.slot_marginals
        diffs = np.abs(m[:, None, :] - m[None, :, :]).sum(axis=2) * 0.5
        return float(diffs.max())


def permutation_prior_bruteforce(points, params: ModelParams | None = None, *,
                                 mode: str = "stochastic", point_posteriors=None,
                                 joint: bool = False) -> PermutationPrior:
    """Average over all ``(2n)!`` permutations of the product posterior.

    Slot ``s`` of a permuted sequence holds point ``T(s)``; averaging the
    product ``prod_s q(J_s | x_{T(s)})`` over ``T`` gives the permutation
    prior. Its per-slot marginals are returned, and the full joint over
    ``K^(2n)`` index tuples when ``joint`` is set.
    """
    if point_posteriors is None:
        if params is None:
            raise ValueError("need params or point_posteriors")
        q = posteriors(params, np.atleast_2d(points), mode)
    else:
        q = np.atleast_2d(np.asarray(point_posteriors, dtype=np.float64))
    two_n, K = q.shape
    if two_n > MAX_BRUTEFORCE_POINTS:
        raise ValueError(f"enumeration limited to {MAX_BRUTEFORCE_POINTS} points, got {two_n}")
    if joint and K ** two_n > MAX_JOINT_ENTRIES:
        raise ValueError("joint table too large")

    perms = list(itertools.permutations(range(two_n)))
    slots = np.zeros((two_n, K))
    table = np.zeros((K,) * two_n) if joint else None
    for perm in perms:
        rows = q[list(perm)]
        slots += rows
        if joint:
            prod = rows[0]
            for r in rows[1:]:
                prod = np.multiply.outer(prod, r)
            table += prod
    slots /= len(perms)
    if joint:
        table /= math.factorial(two_n)
    return PermutationPrior(slots, table)
