"""Brute-force reference checks run by the ``oracle`` subcommand."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .infotools import empirical_kl_term, knn_mi, marginal_prior, plugin_discrete_mi
from .resampling import permutation_prior_bruteforce
from .transport import EmpiricalMeasure, w2_exact

BSC_025_MI = math.log(2) + 0.25 * math.log(0.25) + 0.75 * math.log(0.75)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def refine_prior(post: np.ndarray, start: np.ndarray, steps: int = 200,
                 lr: float = 0.05, floor: float = 1e-9) -> np.ndarray:
    """Projected gradient descent on ``empirical_kl_term(post, .)`` from ``start``."""
    pi = np.maximum(project_simplex(start), floor)
    pi /= pi.sum()
    target = post.mean(axis=0)
    for _ in range(steps):
        pi = np.maximum(project_simplex(pi + lr * target / pi), floor)
        pi /= pi.sum()
    return pi


def brute_force_w2sq(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum over all matchings of the mean squared distance (equal sizes)."""
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    rows = np.arange(len(a))
    return min(float(cost[rows, list(p)].mean()) for p in itertools.permutations(rows))


def check_permutation_prior(rng: np.random.Generator, trials: int = 20) -> OracleResult:
    worst = 0.0
    for _ in range(trials):
        q = rng.dirichlet(np.ones(3), size=4)
        prior = permutation_prior_bruteforce(None, point_posteriors=q)
        err = np.abs(prior.slot_marginals - q.mean(axis=0)).max()
        worst = max(worst, float(err), prior.max_slot_tv)
    return OracleResult("permutation_prior_slots", worst <= 1e-12, worst, 1e-12,
                        "2n=4 enumeration vs quarter mixture")


def check_transport(rng: np.random.Generator, trials: int = 100) -> OracleResult:
    worst = 0.0
    for t in range(trials):
        size = 4 if t % 2 == 0 else 6
        a, b = rng.random((size, 2)), rng.random((size, 2))
        exact = w2_exact(EmpiricalMeasure(a), EmpiricalMeasure(b)) ** 2
        worst = max(worst, abs(exact - brute_force_w2sq(a, b)))
    return OracleResult("w2_vs_enumeration", worst <= 1e-9, worst, 1e-9, "4v4 and 6v6 uniform")


def check_marginal_prior(rng: np.random.Generator, problems: int = 50,
                 priors: int = 100) -> OracleResult:
    worst = math.inf
    for _ in range(problems):
        K = int(rng.integers(2, 5))
        post = rng.dirichlet(np.ones(K) * 0.7, size=int(rng.integers(3, 12)))
        best = empirical_kl_term(post, marginal_prior(post))
        cands = list(rng.dirichlet(np.ones(K), size=priors))
        cands.append(refine_prior(post, cands[0]))
        margin = min(empirical_kl_term(post, c) - best for c in cands)
        worst = min(worst, margin)
    return OracleResult("marginal_prior_optimality", worst >= -1e-9, worst, -1e-9,
                        "min margin of competitors over the marginal prior")


def check_plugin_bsc(rng: np.random.Generator, samples: int = 100_000) -> OracleResult:
    x = rng.integers(0, 2, size=samples)
    y = x ^ (rng.random(samples) < 0.25)
    err = abs(plugin_discrete_mi(x, y) - BSC_025_MI)
    return OracleResult("plugin_mi_bsc", err <= 0.01, err, 0.01, "BSC(0.25), 1e5 samples")


def check_knn_separated(rng: np.random.Generator, samples: int = 10_000) -> OracleResult:
    y = rng.integers(0, 2, size=samples)
    x = np.where(y == 1, 10.0, -10.0) + rng.standard_normal(samples)
    err = abs(knn_mi(x, y, k=3) - math.log(2))
    return OracleResult("knn_mi_separated", err <= 0.05, err, 0.05, "two Gaussians at +-10")


def run_all(seed: int = 0) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    return [check_permutation_prior(rng), check_transport(rng), check_marginal_prior(rng),
            check_plugin_bsc(rng), check_knn_separated(rng)]
