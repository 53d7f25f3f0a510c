"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines.

Run with ``pytest tests/test_acceptance.py`` (the summary is printed at the
end) or directly with ``python tests/test_acceptance.py``. The trend
criteria (8-11, 13) train many small models and take a few minutes.
"""
import math
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from vqgb import bounds, oracles
from vqgb.diffcore import grad_check
from vqgb.experiments import make_config, run_gap_sweep, run_genquality, run_prior_ab
from vqgb.infotools import knn_mi, plugin_discrete_mi
from vqgb.model import ModelParams, flatten_grads, sqvae_loss
from vqgb.quantizer import Codebook, gumbel_softmax_sample, nearest_index, stochastic_posterior
from vqgb.trainer import Architecture
from vqgb.transport import EmpiricalMeasure, w2_exact

BSC = math.log(2) + 0.25 * math.log(0.25) + 0.75 * math.log(0.75)


def test_01_gradient(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    arch = Architecture.mlp(2, 2, 8)
    p = ModelParams.initialize(arch.encoder, arch.decoder, 8, rng)
    batch = rng.random((32, 2))
    noise = -np.log(-np.log(rng.random((32, 8))))

    def f(vec):
        loss, tape = sqvae_loss(p.with_vector(vec), batch, 1.0, noise=noise)
        return loss, flatten_grads(tape.backward())

    vec = p.to_vector()
    err = grad_check(f, vec, coords=rng.choice(vec.size, 64, replace=False))
    dt = time.perf_counter() - t0
    accept(1, "gradient correctness", err <= 1e-4 and dt < 10,
           f"max rel err {err:.2e}, {dt:.2f}s")


def test_02_posterior_limits(accept):
    rng = np.random.default_rng(1)
    agree, checked, worst_uniform = 0, 0, 0.0
    while checked < 1000:
        K, dz = int(rng.integers(2, 9)), int(rng.integers(1, 4))
        cb = Codebook(rng.standard_normal((K, dz)))
        z = rng.standard_normal((1, dz))
        d = np.sort(((z - cb.entries) ** 2).sum(1))
        if d[1] - d[0] < 1e-6:
            continue
        checked += 1
        agree += int(np.argmax(stochastic_posterior(z, cb, 1e6)[0]) == nearest_index(z, cb)[0])
        worst_uniform = max(worst_uniform,
                            float(np.abs(stochastic_posterior(z, cb, 0.0) - 1 / K).max()))
    accept(2, "posterior limits", agree == 1000 and worst_uniform <= 1e-12,
           f"{agree}/1000 argmax agree, beta=0 max dev {worst_uniform:.1e}")


def test_03_gumbel(accept):
    rng = np.random.default_rng(2)
    probs = np.array([0.7, 0.2, 0.1])
    n = 100_000
    draws = gumbel_softmax_sample(np.tile(np.log(probs), (n, 1)), 1e-6, rng)
    freq = np.bincount(draws.argmax(1), minlength=3) / n
    z = np.abs(freq - probs) / np.sqrt(probs * (1 - probs) / n)
    accept(3, "gumbel calibration", bool(np.all(z <= 3)),
           f"freq {np.round(freq, 4).tolist()}, max |z| {z.max():.2f}")


def test_04_marginal_prior(accept):
    t0 = time.perf_counter()
    r = oracles.check_marginal_prior(np.random.default_rng(3))
    dt = time.perf_counter() - t0
    accept(4, "marginal prior optimality", r.passed and dt < 30,
           f"min margin {r.value:.2e}, {dt:.1f}s")


def test_05_permutation_prior(accept):
    r = oracles.check_permutation_prior(np.random.default_rng(4))
    accept(5, "permutation prior oracle", r.passed, f"max deviation {r.value:.1e}")


def test_06_mi_calibration(accept):
    rng = np.random.default_rng(5)
    x = rng.integers(0, 2, 100_000)
    plug = abs(plugin_discrete_mi(x, x ^ (rng.random(100_000) < 0.25)) - BSC)
    y = rng.integers(0, 2, 10_000)
    sep = abs(knn_mi(np.where(y == 1, 10.0, -10.0) + rng.standard_normal(10_000), y, k=3)
              - math.log(2))
    ind = knn_mi(rng.standard_normal(10_000), rng.integers(0, 2, 10_000), k=3)
    accept(6, "MI estimator calibration", plug <= 0.01 and sep <= 0.05 and ind <= 0.02,
           f"plug-in err {plug:.4f}, k-NN err {sep:.4f}, independent {ind:.4f}")


def test_07_transport(accept):
    rng = np.random.default_rng(6)
    r = oracles.check_transport(rng)
    axioms = True
    for _ in range(50):
        a, b, c = (EmpiricalMeasure(rng.random((5, 2))) for _ in range(3))
        ab, bc, ac = w2_exact(a, b), w2_exact(b, c), w2_exact(a, c)
        axioms &= abs(ab - w2_exact(b, a)) <= 1e-12 and ac <= ab + bc + 1e-9
        axioms &= w2_exact(a, a) <= 1e-12
    accept(7, "exact transport", r.passed and axioms,
           f"max |w2^2 - brute force| {r.value:.1e}, axioms {'hold' if axioms else 'fail'}")


@pytest.mark.slow
def test_08_generation_bound(accept, tmp_path):
    t0 = time.perf_counter()
    res = run_genquality(make_config(overrides=["n_grid=200", "K_grid=8", "seeds=10",
                                                f"out={tmp_path}"]))
    dt = time.perf_counter() - t0
    rows = res["rows"]
    ok = len(rows) == 10 and not res["violations"] and dt < 900
    worst = max(r[3] / r[4] for r in rows) if rows else math.inf
    accept(8, "generation bound validity", ok,
           f"{len(rows) - len(res['violations'])}/10 seeds hold, max w2sq/rhs {worst:.4f}, "
           f"{dt:.0f}s")


@pytest.mark.slow
def test_09_k1_rate(accept, tmp_path):
    cfg = make_config(overrides=["K_grid=1", "n_grid=50,100,200,400,800", "seeds=20",
                                 "u_draws=2", f"out={tmp_path}"])
    summary = run_gap_sweep(cfg).summary
    n = np.array([r[0] for r in summary], dtype=float)
    gap = np.array([r[6] for r in summary])
    slope = float(np.polyfit(np.log(n), np.log(gap), 1)[0])
    accept(9, "K=1 gap rate", -0.7 <= slope <= -0.3,
           f"log-log slope {slope:.3f}, mean gaps {np.round(gap, 5).tolist()}")


@pytest.mark.slow
def test_10_cmi_trend(accept, tmp_path):
    t0 = time.perf_counter()
    summary = run_gap_sweep(make_config(overrides=[f"out={tmp_path}"])).summary
    dt = time.perf_counter() - t0
    cmi = [r[14] for r in summary]
    kl = [r[12] for r in summary]
    rho = float(spearmanr(np.arange(len(cmi)), cmi)[0])
    monotone = all(a > b for a, b in zip(cmi, cmi[1:]))
    ok = rho < 0 and kl[-1] >= 0.5 * kl[0] and dt < 1800
    accept(10, "CMI trend analog", ok,
           f"cmi {np.round(cmi, 4).tolist()} (spearman {rho:.2f}, "
           f"{'' if monotone else 'not '}monotone), kl first {kl[0]:.3f} last {kl[-1]:.3f}, "
           f"{dt:.0f}s")


@pytest.mark.slow
def test_11_decoder_depth(accept, tmp_path):
    cfg = make_config(overrides=["n_grid=512", "depth_grid=2,5", "u_draws=2",
                                 f"out={tmp_path}"])
    shallow, deep = run_gap_sweep(cfg).summary
    diff = deep[6] - shallow[6]
    sd = math.sqrt((shallow[7] ** 2 + deep[7] ** 2) / 2)
    ok = abs(diff) < sd and deep[8] < shallow[8]
    accept(11, "decoder depth independence", ok,
           f"gap {shallow[6]:.5f}+-{shallow[7]:.5f} -> {deep[6]:.5f}+-{deep[7]:.5f} "
           f"(effect {diff / sd:+.2f} sd), train loss {shallow[8]:.4f} -> {deep[8]:.4f}")


def test_12_formulas(accept):
    B = bounds.BoundInputs
    checks = [
        (bounds.rhs_supersample(B(n=100, Delta=1.0, kl_empirical=0.005)),
         2 * math.sqrt(0.005) + 0.1),
        (bounds.rhs_permutation(B(n=100, Delta=1.0, kl_cmi=0.0009)), 0.19),
        (bounds.rhs_metric_entropy(B(n=100, Delta=1.0, beta_q=1.0, delta_cover=1e-4,
                                     Delta_z=1.0, log_covering_number=10.0)),
         4 * math.sqrt(0.02) + 3 * math.sqrt(0.2) + 0.1),
        (bounds.rhs_wasserstein(B(n=100, Delta=1.0, train_loss_mean=0.01, kl_empirical=0.02)),
         1.02),
        (bounds.natarajan_cmi_cap(1, 2, 10), math.log(20 * math.e)),
    ]
    worst = max(abs(got - ref) / abs(ref) for got, ref in checks)
    accept(12, "formula evaluators", worst <= 1e-12, f"max rel err {worst:.1e}")


@pytest.mark.slow
def test_13_prior_ab(accept, tmp_path):
    res = run_prior_ab(make_config(overrides=["n_grid=256", "seeds=10", f"out={tmp_path}"]))
    arms = {r[0]: r for r in res["summary"]}
    ok = set(arms) == {"baseline", "cdvib"} and all(r[5] == 10 for r in arms.values())
    ok &= (tmp_path / "prior_ab_summary.csv").exists()
    b, c = arms["baseline"], arms["cdvib"]
    direction = "cdvib <= baseline" if c[6] <= b[6] else "cdvib > baseline"
    accept(13, "prior A/B harness", ok,
           f"test mse baseline {b[6]:.4f}+-{b[7]:.4f}, cdvib {c[6]:.4f}+-{c[7]:.4f} "
           f"({direction}, reported only)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
