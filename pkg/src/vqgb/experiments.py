"""Experiment configuration, seeded sweeps and CSV artifact emission.

Every cell ``(n, K, dz, depth, seed)`` is an isolated deterministic run whose
random streams derive from the master seed through ``numpy.random.SeedSequence``.
Per-cell files are written atomically under ``<out>/cells``; aggregate CSVs are
assembled afterwards in grid order, so the output set depends only on the
configuration and the master seed.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .bounds import BoundInputs, BoundReport, parametric_log_covering
from .datasets import BoundedDataset, _atomic_write_text, import_csv, load_idx, synth_mixture
from .infotools import (CMI_RECORD_COLUMNS, CmiEstimate, CmiProtocolConfig, CmiReplicaError,
                        aggregate_cmi, draw_seeds, empirical_kl_term, estimate_cmi_term,
                        marginal_prior, records_from_params, uniform_prior)
from .model import encode, eval_mode, posteriors, reconstruction_losses
from .resampling import Supersample, gap_details, make_supersample, sample_u, split_by_u
from .trainer import Architecture, TrainConfig, train
from .transport import validate_generation_bound

GRID_FIELDS = ("n_grid", "K_grid", "dz_grid", "depth_grid")

# Stream tags for SeedSequence derivation.
_DATA, _CELL, _FRESH, _TRAIN = 0xDA7A, 0xCE11, 0xF2E5, 0x7A1


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment configuration; see :data:`CONFIG_SCHEMA` for each key."""

    dataset: str = "synthetic"
    dim: int = 2
    components: int = 4
    spread: float = 0.05
    n_grid: tuple = (64, 128, 256, 512)
    K_grid: tuple = (8,)
    dz_grid: tuple = (2,)
    depth_grid: tuple = (2,)
    seeds: int = 10
    seed: int = 0
    hidden: int = 16
    enc_depth: int = 1
    activation: str = "tanh"
    codebook_init: str = "box"
    codebook_scale: float = 0.5
    log_sigma2_init: float = 0.0
    log_sigma_psi2_init: float = -9.0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_halve_patience_epochs: int = 3
    anneal_rate: float = 1e-5
    alpha_ema: float = 0.9
    lambda_mix: float = 0.0
    mode: str = "sq_stochastic"
    sigma2: str = "mle"
    u_draws: int = 5
    knn_k: int = 3
    pooling: str = "per_seed"
    cmi_feature: str = "loss"
    fresh_test: int = 0
    holdout: int = 1000
    gen_factor: int = 10
    ab_lambda: float = 0.5
    ab_alpha: float = 0.9
    cover_L0: float = 1.0
    out: str = ""

    def __post_init__(self):
        for name in GRID_FIELDS:
            grid = tuple(int(v) for v in getattr(self, name))
            if not grid or min(grid) < 1:
                raise ValueError(f"{name} must be a non-empty list of positive integers")
            object.__setattr__(self, name, grid)
        if self.seeds < 1 or self.dim < 1 or self.components < 1 or self.hidden < 1:
            raise ValueError("seeds, dim, components and hidden must be positive")
        if not (self.dataset == "synthetic" or self.dataset.startswith(("idx:", "csv:"))):
            raise ValueError("dataset must be 'synthetic', 'idx:PATH' or 'csv:PATH'")
        if self.fresh_test < 0 or self.holdout < 1 or self.gen_factor < 1:
            raise ValueError("fresh_test >= 0, holdout >= 1 and gen_factor >= 1 required")
        if self.fresh_test and self.dataset != "synthetic":
            raise ValueError("fresh_test needs a samplable (synthetic) dataset")
        # Validate the embedded component configs eagerly.
        self.train_config()
        self.protocol()

    def train_config(self, **changes) -> TrainConfig:
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                         lr_halve_patience_epochs=self.lr_halve_patience_epochs,
                         anneal_rate=self.anneal_rate, alpha_ema=self.alpha_ema,
                         lambda_mix=self.lambda_mix, mode=self.mode, sigma2=self.sigma2)
        return replace(tc, **changes)

    def protocol(self, **changes) -> CmiProtocolConfig:
        return CmiProtocolConfig(**{"num_u_draws": self.u_draws, "knn_k": self.knn_k,
                                    "pooling": self.pooling, "feature": self.cmi_feature,
                                    **changes})

    def architecture(self, dim: int, dz: int, K: int, depth: int) -> Architecture:
        arch = Architecture.mlp(dim, dz, K, self.hidden, self.enc_depth, depth, self.activation)
        return replace(arch, codebook_scale=self.codebook_scale,
                       log_sigma2_init=self.log_sigma2_init,
                       log_sigma_psi2_init=self.log_sigma_psi2_init,
                       codebook_init=self.codebook_init)

    def cells(self) -> list[tuple[int, int, int, int, int]]:
        """Grid in output order: ``(n, K, dz, depth, seed)``."""
        return [(n, K, dz, depth, s) for n in self.n_grid for K in self.K_grid
                for dz in self.dz_grid for depth in self.depth_grid for s in range(self.seeds)]

    def output_dir(self) -> str:
        out = self.out or os.environ.get("VQGB_OUT", "") or "vqgb_out"
        os.makedirs(out, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out!r} is not writable")
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


CONFIG_SCHEMA = {
    "dataset": "'synthetic' (Gaussian mixture), 'idx:PATH' or 'csv:PATH'",
    "dim": "synthetic data dimension",
    "components": "synthetic mixture components (lattice means in [0.2, 0.8]^dim)",
    "spread": "synthetic component standard deviation",
    "n_grid": "comma list of training-set sizes n",
    "K_grid": "comma list of codebook sizes",
    "dz_grid": "comma list of latent widths",
    "depth_grid": "comma list of decoder hidden-layer counts",
    "seeds": "number of seeds per grid point",
    "seed": "master seed",
    "hidden": "hidden width of encoder and decoder",
    "enc_depth": "encoder hidden-layer count",
    "activation": "tanh, relu or identity",
    "codebook_init": "random, data or box",
    "codebook_scale": "std of 'random' codebook entries",
    "log_sigma2_init": "initial log decoder variance",
    "log_sigma_psi2_init": "initial log dequantization variance",
    "epochs": "training epochs",
    "batch_size": "minibatch size (capped at n)",
    "lr": "Adam learning rate",
    "lr_halve_patience_epochs": "epochs without improvement before halving lr",
    "anneal_rate": "Gumbel temperature decay rate per step",
    "alpha_ema": "EMA weight of the data-dependent prior",
    "lambda_mix": "weight of the KL-to-prior regularizer (0 = entropy only)",
    "mode": "sq_stochastic or vq_deterministic",
    "sigma2": "learned or mle decoder variance",
    "u_draws": "U draws (retrainings) per cell",
    "knn_k": "neighbors of the k-NN MI estimator",
    "pooling": "per_seed or pooled CMI protocol",
    "cmi_feature": "loss or index CMI estimator for the sweep summary",
    "fresh_test": "if > 0, gap test loss uses this many fresh synthetic points",
    "holdout": "holdout size for generation and A/B test loss",
    "gen_factor": "generated samples per training point",
    "ab_lambda": "lambda_mix of the CDVIB arm",
    "ab_alpha": "alpha_ema of the CDVIB arm",
    "cover_L0": "Lipschitz scale in the parametric covering number",
    "out": "output directory (falls back to $VQGB_OUT, then ./vqgb_out)",
}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = val
    return out


def make_config(values: dict | None = None, overrides: list[str] | tuple = ()) -> ExperimentConfig:
    """Build a config from raw string ``values`` then ``KEY=VALUE`` overrides."""
    raw = dict(values or {})
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"unknown override key {key!r}")
        raw[key] = val
    defaults = ExperimentConfig()
    kwargs = {}
    for key, val in raw.items():
        default = getattr(defaults, key)
        kwargs[key] = _coerce(key, val, default) if isinstance(val, str) else val
    return ExperimentConfig(**kwargs)


def load_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    values = {}
    if path:
        with open(path) as fh:
            values = parse_config_text(fh.read())
    return make_config(values, overrides)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- data

_FILE_CACHE: dict[str, BoundedDataset] = {}


def _file_dataset(spec: str) -> BoundedDataset:
    if spec not in _FILE_CACHE:
        kind, path = spec.split(":", 1)
        _FILE_CACHE[spec] = load_idx(path) if kind == "idx" else import_csv(path)
    return _FILE_CACHE[spec]


def data_dim(cfg: ExperimentConfig) -> int:
    return cfg.dim if cfg.dataset == "synthetic" else _file_dataset(cfg.dataset).dim


@dataclass
class CellData:
    supersample: Supersample
    holdout: np.ndarray
    fresh: np.ndarray | None = None


def cell_data(cfg: ExperimentConfig, n: int, seed: int) -> CellData:
    """Supersample of ``2n`` points plus a disjoint holdout, shared across K, dz and depth."""
    rng = np.random.default_rng(derive_seed(cfg.seed, _DATA, n, seed))
    if cfg.dataset == "synthetic":
        pts = synth_mixture(cfg.dim, cfg.components, 2 * n + cfg.holdout, cfg.spread, rng).points
        hold = pts[2 * n:]
        pts = pts[:2 * n]
    else:
        data = _file_dataset(cfg.dataset)
        if data.n < 2 * n + 1:
            raise ValueError(f"dataset has {data.n} points, need more than {2 * n}")
        order = rng.permutation(data.n)
        pts = data.points[order[:2 * n]]
        hold = data.points[order[2 * n:2 * n + cfg.holdout]]
    ss = make_supersample(pts, rng)
    fresh = None
    if cfg.fresh_test:
        frng = np.random.default_rng(derive_seed(cfg.seed, _FRESH, n, seed))
        fresh = synth_mixture(cfg.dim, cfg.components, cfg.fresh_test, cfg.spread, frng).points
    return CellData(ss, hold, fresh)


# ---------------------------------------------------------------- CSV helpers

def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            raise ValueError("NaN cannot be written to a result CSV")
        return repr(v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_cell(v) for v in r])
    return buf.getvalue()


def _mean_std(vals) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    if a.size == 0:
        return 0.0, 0.0
    if not np.all(np.isfinite(a)):
        return math.inf, math.inf
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _cell_tag(n, K, dz, depth, seed) -> str:
    return f"n{n}_K{K}_dz{dz}_depth{depth}_seed{seed}"


def _map_cells(fn, cfg: ExperimentConfig, cells, jobs: int) -> list:
    args = [(cfg, c) for c in cells]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


# ---------------------------------------------------------------- gap sweep

GAP_COLUMNS = ("n", "K", "dz", "seed", "u_draw", "train_loss", "test_loss", "gap")
GAP_DETAIL_COLUMNS = ("n", "K", "dz", "depth", "seed", "u_draw", "train_loss", "test_loss",
                      "gap", "signed_gap", "kl_uniform", "kl_marginal", "epochs_run")
GAP_SUMMARY_COLUMNS = ("n", "K", "dz", "depth", "n_seeds", "n_replicas", "gap_mean", "gap_std",
                       "train_loss_mean", "train_loss_std", "test_loss_mean",
                       "kl_uniform_mean", "kl_marginal_mean", "kl_marginal_std",
                       "cmi_loss_mean", "cmi_loss_std", "cmi_index_mean", "cmi_index_std")
FAILURE_COLUMNS = ("task", "n", "K", "dz", "depth", "seed", "u_draw", "error")


@dataclass
class CellResult:
    cell: tuple
    rows: list = field(default_factory=list)
    records: np.ndarray = field(default_factory=lambda: np.empty((0, len(CMI_RECORD_COLUMNS))))
    failures: list = field(default_factory=list)
    cmi_loss: float | None = None
    cmi_index: float | None = None


def fit(cfg: ExperimentConfig, train_pts: np.ndarray, arch: Architecture, train_seed: int,
        **changes):
    tc = cfg.train_config(seed=train_seed, **changes)
    return train(tc, train_pts, arch, np.random.default_rng(train_seed))


def run_gap_cell(cfg: ExperimentConfig, cell: tuple, write_dir: str | None = None) -> CellResult:
    """Train one replica per U draw; gap rows, KL terms and CMI records."""
    n, K, dz, depth, seed = cell
    data = cell_data(cfg, n, seed)
    ss = data.supersample
    arch = cfg.architecture(ss.dim, dz, K, depth)
    mode = eval_mode(cfg.mode)
    key = derive_seed(cfg.seed, _CELL, n, seed)
    res = CellResult(cell)
    parts = []
    for d in range(cfg.u_draws):
        u_seed, train_seed = draw_seeds(key, d, cfg.pooling)
        u = sample_u(n, u_seed)
        train_pts, _ = split_by_u(ss, u)
        try:
            params, _, hist = fit(cfg, train_pts, arch, train_seed)
            g = gap_details(params, ss, u, mode, test_points=data.fresh)
            q = posteriors(params, train_pts, mode)
            kl_u = empirical_kl_term(q, uniform_prior(K))
            kl_m = empirical_kl_term(q, marginal_prior(q))
            parts.append(records_from_params(params, ss, u, mode, seed, d))
        except Exception as exc:  # replica failure is recorded, the sweep continues
            res.failures.append(("gap", n, K, dz, depth, seed, d, f"{type(exc).__name__}: {exc}"))
            continue
        res.rows.append((n, K, dz, depth, seed, d, g.train_loss, g.test_loss, g.gap, g.signed,
                         kl_u, kl_m, len(hist)))
    if parts:
        res.records = np.vstack(parts)
    if len(parts) >= 2:
        res.cmi_loss = aggregate_cmi(res.records, "loss", cfg.knn_k)
        res.cmi_index = aggregate_cmi(res.records, "index")
    if write_dir:
        tag = _cell_tag(*cell)
        _atomic_write_text(os.path.join(write_dir, f"gap_{tag}.csv"),
                           csv_text(GAP_DETAIL_COLUMNS, res.rows))
        _atomic_write_text(os.path.join(write_dir, f"cmi_{tag}.csv"),
                           CmiEstimate(0.0, cfg.pooling, res.records).to_csv())
    return res


def _gap_worker(args):
    cfg, cell = args
    return run_gap_cell(cfg, cell, os.path.join(cfg.output_dir(), "cells"))


def summarize_gap(results: list[CellResult]) -> list[tuple]:
    groups: dict[tuple, list[CellResult]] = {}
    for r in results:
        groups.setdefault(r.cell[:4], []).append(r)
    out = []
    for key, rs in groups.items():
        rows = [row for r in rs for row in r.rows]
        if not rows:
            continue
        a = np.array([row[6:12] for row in rows], dtype=np.float64)
        # seed-level means first so every seed weighs the same
        per_seed = np.array([np.mean([row[8] for row in r.rows]) for r in rs if r.rows])
        tr_seed = np.array([np.mean([row[6] for row in r.rows]) for r in rs if r.rows])
        klm_seed = np.array([np.mean([row[11] for row in r.rows]) for r in rs if r.rows])
        cl = [r.cmi_loss for r in rs if r.cmi_loss is not None]
        ci = [r.cmi_index for r in rs if r.cmi_index is not None]
        out.append((*key, len(per_seed), len(rows), *_mean_std(per_seed), *_mean_std(tr_seed),
                    float(a[:, 1].mean()), float(a[:, 4].mean()), *_mean_std(klm_seed),
                    *_mean_std(cl), *_mean_std(ci)))
    return out


@dataclass
class SweepOutput:
    results: list
    summary: list
    failures: list
    files: dict


def run_gap_sweep(cfg: ExperimentConfig, jobs: int = 1) -> SweepOutput:
    """Gap sweep over the grid; writes gap, detail, summary, CMI and failure CSVs."""
    out = cfg.output_dir()
    results = _map_cells(_gap_worker, cfg, cfg.cells(), jobs)
    rows = [row for r in results for row in r.rows]
    failures = [f for r in results for f in r.failures]
    summary = summarize_gap(results)
    cmi_rows = [(*r.cell, cfg.pooling, r.cmi_loss, r.cmi_index) for r in results
                if r.cmi_loss is not None]
    recs = [r.records for r in results if len(r.records)]
    files = {
        "gap.csv": csv_text(GAP_COLUMNS, [(*r[:3], *r[4:9]) for r in rows]),
        "gap_detail.csv": csv_text(GAP_DETAIL_COLUMNS, rows),
        "gap_summary.csv": csv_text(GAP_SUMMARY_COLUMNS, summary),
        "cmi_estimates.csv": csv_text(("n", "K", "dz", "depth", "seed", "pooling", "cmi_loss",
                                       "cmi_index"), cmi_rows),
        "cmi_records.csv": CmiEstimate(0.0, cfg.pooling,
                                       np.vstack(recs) if recs else
                                       np.empty((0, len(CMI_RECORD_COLUMNS)))).to_csv(),
        "failures.csv": csv_text(FAILURE_COLUMNS, failures),
    }
    for name, text in files.items():
        _atomic_write_text(os.path.join(out, name), text)
    return SweepOutput(results, summary, failures, files)


# ---------------------------------------------------------------- CMI protocol

CMI_SUMMARY_COLUMNS = ("n", "K", "dz", "depth", "pooling", "n_seeds", "cmi_loss_mean",
                       "cmi_loss_std", "cmi_index_mean", "cmi_index_std")


def _cmi_worker(args):
    cfg, (cell, pooling) = args
    n, K, dz, depth, seed = cell
    data = cell_data(cfg, n, seed)
    arch = cfg.architecture(data.supersample.dim, dz, K, depth)
    key = derive_seed(cfg.seed, _CELL, n, seed)
    try:
        est = estimate_cmi_term(cfg.train_config(), data.supersample, cfg.protocol(pooling=pooling),
                                arch, seed=key)
        recs, err = est.records, None
    except CmiReplicaError as exc:
        recs, err = exc.records, str(exc)
    recs = recs.copy()
    recs[:, 2] = seed
    tag = f"{_cell_tag(*cell)}_{pooling}"
    _atomic_write_text(os.path.join(cfg.output_dir(), "cells", f"cmi_{tag}.csv"),
                       CmiEstimate(0.0, pooling, recs).to_csv())
    if err is not None or len(np.unique(recs[:, 3])) < 2:
        return cell, pooling, recs, None, None, err or "fewer than two replicas"
    return (cell, pooling, recs, aggregate_cmi(recs, "loss", cfg.knn_k),
            aggregate_cmi(recs, "index"), None)


def run_cmi(cfg: ExperimentConfig, jobs: int = 1, poolings=("per_seed", "pooled")) -> dict:
    """CMI estimates under both pooling protocols with both estimators."""
    out = cfg.output_dir()
    tasks = [(c, p) for p in poolings for c in cfg.cells()]
    results = _map_cells(_cmi_worker, cfg, tasks, jobs)
    est_rows, failures, files = [], [], {}
    for cell, pooling, recs, cl, ci, err in results:
        if err is None:
            est_rows.append((*cell, pooling, cl, ci))
        else:
            failures.append(("cmi", *cell, -1, err))
    summary = []
    for pooling in poolings:
        groups: dict[tuple, list] = {}
        for r in est_rows:
            if r[5] == pooling:
                groups.setdefault(r[:4], []).append(r)
        for key, rs in groups.items():
            summary.append((*key, pooling, len(rs), *_mean_std([r[6] for r in rs]),
                            *_mean_std([r[7] for r in rs])))
        recs = [r[2] for r in results if r[1] == pooling and len(r[2])]
        files[f"cmi_records_{pooling}.csv"] = CmiEstimate(
            0.0, pooling, np.vstack(recs) if recs else
            np.empty((0, len(CMI_RECORD_COLUMNS)))).to_csv()
    files["cmi_estimates.csv"] = csv_text(("n", "K", "dz", "depth", "seed", "pooling",
                                           "cmi_loss", "cmi_index"), est_rows)
    files["cmi_summary.csv"] = csv_text(CMI_SUMMARY_COLUMNS, summary)
    files["cmi_failures.csv"] = csv_text(FAILURE_COLUMNS, failures)
    for name, text in files.items():
        _atomic_write_text(os.path.join(out, name), text)
    return {"estimates": est_rows, "summary": summary, "failures": failures, "files": files}


# ---------------------------------------------------------------- bound report

def bound_inputs_for(cfg: ExperimentConfig, params, ss: Supersample, u, records) -> tuple:
    """Measured gap, :class:`BoundInputs` and the loss-feature CMI for one trained model."""
    mode = eval_mode(cfg.mode)
    n = ss.n
    train_pts, _ = split_by_u(ss, u)
    g = gap_details(params, ss, u, mode)
    q = posteriors(params, train_pts, mode)
    K = params.K
    z = np.vstack([params.codebook.entries,
                   *(encode(params, ss.pairs[:, c]) for c in (0, 1))])
    d_phi = params.encoder.n_params
    delta_cover = 1.0 / n
    multi = len(np.unique(records[:, 3])) >= 2 if len(records) else False
    kl_cmi = aggregate_cmi(records, "index") if multi else 0.0
    loss_cmi = aggregate_cmi(records, "loss", cfg.knn_k) if multi else 0.0
    b = BoundInputs(
        n=n, Delta=float(ss.dim), Delta_z=params.codebook.latent_diameter(z[K:]) ** 2,
        kl_empirical=empirical_kl_term(q, marginal_prior(q)), kl_cmi=kl_cmi,
        train_loss_mean=g.train_loss, beta_q=params.eval_beta, delta_cover=delta_cover,
        log_covering_number=parametric_log_covering(d_phi, params.codebook.dz, cfg.cover_L0,
                                                    delta_cover),
        d_K=d_phi + K * params.codebook.dz, K=K)
    return g, b, loss_cmi


def _bounds_worker(args):
    cfg, cell = args
    n, K, dz, depth, seed = cell
    data = cell_data(cfg, n, seed)
    ss = data.supersample
    arch = cfg.architecture(ss.dim, dz, K, depth)
    mode = eval_mode(cfg.mode)
    key = derive_seed(cfg.seed, _CELL, n, seed)
    parts, first = [], None
    for d in range(cfg.u_draws):
        u_seed, train_seed = draw_seeds(key, d, "per_seed")
        u = sample_u(n, u_seed)
        params, _, _ = fit(cfg, split_by_u(ss, u)[0], arch, train_seed)
        parts.append(records_from_params(params, ss, u, mode, seed, d))
        if first is None:
            first = (params, u)
    g, b, loss_cmi = bound_inputs_for(cfg, first[0], ss, first[1], np.vstack(parts))
    return cell, BoundReport.from_inputs(b, g.gap, basic_cmi=loss_cmi, seed=seed, dz=dz,
                                         depth=depth, loss_cmi=loss_cmi,
                                         signed_gap=g.signed)


def run_bound_report(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """One bound report per cell; returns reports and the list of violations."""
    out = cfg.output_dir()
    results = []
    failures = []
    for cell, rep in _map_cells(_safe(_bounds_worker), cfg, cfg.cells(), jobs):
        if isinstance(rep, str):
            failures.append(("bounds", *cell, -1, rep))
        else:
            results.append((cell, rep))
    header = "seed,dz,depth," + (results[0][1].csv_header() if results else "")
    lines = [header] + [f"{c[4]},{c[2]},{c[3]},{r.csv_row()}" for c, r in results]
    texts = [f"[seed {c[4]}, dz {c[2]}, depth {c[3]}]\n{r.text()}" for c, r in results]
    violations = [(c, v) for c, r in results for v in r.violations]
    _atomic_write_text(os.path.join(out, "bounds.csv"), "\n".join(lines) + "\n")
    _atomic_write_text(os.path.join(out, "bounds.txt"), "\n".join(texts))
    _atomic_write_text(os.path.join(out, "bounds_failures.csv"), csv_text(FAILURE_COLUMNS,
                                                                           failures))
    return {"reports": results, "violations": violations, "failures": failures}


class _safe:
    """Picklable wrapper turning worker exceptions into ``(cell, message)``."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, args):
        try:
            return self.fn(args)
        except Exception as exc:
            return args[1], f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------- generation quality

GEN_COLUMNS = ("seed", "n", "K", "w2sq", "rhs", "holds", "dz", "depth", "train_loss",
               "kl_empirical")


def _gen_worker(args):
    cfg, cell = args
    n, K, dz, depth, seed = cell
    data = cell_data(cfg, n, seed)
    train_pts = data.supersample.pairs[:, 0]
    arch = cfg.architecture(data.supersample.dim, dz, K, depth)
    train_seed = derive_seed(cfg.seed, _TRAIN, n, seed)
    params, _, _ = fit(cfg, train_pts, arch, train_seed)
    chk = validate_generation_bound(params, uniform_prior(K), train_pts, data.holdout,
                                    float(data.supersample.dim), n, mode=eval_mode(cfg.mode),
                                    m=cfg.gen_factor * n,
                                    rng=derive_seed(cfg.seed, _FRESH, n, seed, 1))
    return cell, (seed, n, K, chk.w2sq, chk.rhs, chk.holds, dz, depth, chk.train_loss,
                  chk.kl_empirical)


def run_genquality(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Exact W2^2 between holdout and generated samples against the generation bound.

    Generated samples are drawn from the uniform index prior, which does not
    depend on the training data, and the KL term is measured against it.
    """
    out = cfg.output_dir()
    rows, failures = [], []
    for cell, row in _map_cells(_safe(_gen_worker), cfg, cfg.cells(), jobs):
        if isinstance(row, str):
            failures.append(("genquality", *cell, -1, row))
        else:
            rows.append(row)
    _atomic_write_text(os.path.join(out, "genquality.csv"), csv_text(GEN_COLUMNS, rows))
    _atomic_write_text(os.path.join(out, "genquality_failures.csv"),
                       csv_text(FAILURE_COLUMNS, failures))
    return {"rows": rows, "violations": [r for r in rows if not r[5]], "failures": failures}


# ---------------------------------------------------------------- prior A/B

AB_COLUMNS = ("arm", "n", "K", "dz", "depth", "seed", "lambda_mix", "alpha_ema", "test_mse",
              "train_loss")
AB_SUMMARY_COLUMNS = ("arm", "n", "K", "dz", "depth", "n_seeds", "test_mse_mean",
                      "test_mse_std")


def _ab_worker(args):
    cfg, cell = args
    n, K, dz, depth, seed = cell
    data = cell_data(cfg, n, seed)
    train_pts = data.supersample.pairs[:, 0]
    arch = cfg.architecture(data.supersample.dim, dz, K, depth)
    train_seed = derive_seed(cfg.seed, _TRAIN, n, seed)
    mode = eval_mode(cfg.mode)
    rows = []
    for arm, lam, alpha in (("baseline", 0.0, cfg.alpha_ema),
                            ("cdvib", cfg.ab_lambda, cfg.ab_alpha)):
        params, _, _ = fit(cfg, train_pts, arch, train_seed, lambda_mix=lam, alpha_ema=alpha)
        te = float(reconstruction_losses(params, data.holdout, mode, clamp=True).mean())
        tr = float(reconstruction_losses(params, train_pts, mode, clamp=True).mean())
        rows.append((arm, n, K, dz, depth, seed, lam, alpha, te, tr))
    return cell, rows


def run_prior_ab(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Baseline (entropy regularizer) against the EMA-prior CDVIB arm, paired by seed."""
    if cfg.seeds < 2:
        raise ValueError("the A/B comparison needs at least 2 seeds")
    out = cfg.output_dir()
    rows, failures = [], []
    for cell, res in _map_cells(_safe(_ab_worker), cfg, cfg.cells(), jobs):
        if isinstance(res, str):
            failures.append(("prior-ab", *cell, -1, res))
        else:
            rows.extend(res)
    summary = []
    keys = sorted({r[1:5] for r in rows})
    for arm in ("baseline", "cdvib"):
        for key in keys:
            vals = [r[8] for r in rows if r[0] == arm and r[1:5] == key]
            summary.append((arm, *key, len(vals), *_mean_std(vals)))
    _atomic_write_text(os.path.join(out, "prior_ab.csv"), csv_text(AB_COLUMNS, rows))
    _atomic_write_text(os.path.join(out, "prior_ab_summary.csv"),
                       csv_text(AB_SUMMARY_COLUMNS, summary))
    _atomic_write_text(os.path.join(out, "prior_ab_failures.csv"),
                       csv_text(FAILURE_COLUMNS, failures))
    return {"rows": rows, "summary": summary, "failures": failures}


# ---------------------------------------------------------------- single training run

def run_train(cfg: ExperimentConfig) -> dict:
    """Train one model on the first grid cell; writes the history and parameters."""
    n, K, dz, depth, seed = cfg.cells()[0]
    data = cell_data(cfg, n, seed)
    train_pts = data.supersample.pairs[:, 0]
    arch = cfg.architecture(data.supersample.dim, dz, K, depth)
    params, prior, hist = fit(cfg, train_pts, arch, derive_seed(cfg.seed, _TRAIN, n, seed))
    out = cfg.output_dir()
    _atomic_write_text(os.path.join(out, "history.csv"), hist.to_csv())
    path = os.path.join(out, "model.npz")
    tmp = path + ".tmp.npz"
    np.savez(tmp, vector=params.to_vector(), prior=prior,
             encoder_widths=np.array(params.encoder.layer_widths),
             decoder_widths=np.array(params.decoder.layer_widths))
    os.replace(tmp, path)
    return {"params": params, "prior": prior, "history": hist}


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
