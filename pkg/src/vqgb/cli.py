"""Command-line front-end: ``vqgb <subcommand> [--config PATH] [--override KEY=VALUE] ...``.

Exit codes: 0 on success, 2 when any bound-violation flag is raised, 1 on error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiments as ex
from . import oracles

log = logging.getLogger("vqgb")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    common.add_argument("--out", metavar="DIR", help="output directory (else $VQGB_OUT)")
    common.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vqgb", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train one model on the first grid cell",
        "gap": "generalization-gap sweep with KL terms and CMI records",
        "cmi": "CMI estimates under both pooling protocols",
        "bounds": "bound report per cell (exit 2 on violation)",
        "genquality": "exact W2 check of the generation bound (exit 2 on violation)",
        "prior-ab": "baseline vs EMA-prior comparison",
        "oracle": "brute-force reference suites",
        "sweep": "gap sweep, bound report and generation check together",
        "config": "print the effective configuration and schema",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def _config(args) -> ex.ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out={args.out}")
    return ex.load_config(args.config, overrides)


def _print_rows(header, rows):
    print(ex.csv_text(header, rows), end="")


def run(args) -> int:
    if args.command == "oracle":
        results = oracles.run_all(args.seed or 0)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} value={r.value:.3g} "
                  f"tol={r.tolerance:g} ({r.detail})")
        return EXIT_OK if all(r.passed for r in results) else EXIT_ERROR

    cfg = _config(args)
    jobs = max(1, args.jobs)
    if args.command == "config":
        print(cfg.to_text(), end="")
        for key, text in ex.CONFIG_SCHEMA.items():
            print(f"# {key}: {text}")
        return EXIT_OK
    out = cfg.output_dir()
    ex._atomic_write_text(os.path.join(out, "config.txt"), cfg.to_text())

    if args.command == "train":
        res = ex.run_train(cfg)
        h = res["history"]
        print(f"trained {len(h)} epochs; train l0 {h.train_loss[-1]:.6g} -> {out}")
        return EXIT_OK
    if args.command == "gap":
        res = ex.run_gap_sweep(cfg, jobs)
        _print_rows(ex.GAP_SUMMARY_COLUMNS, res.summary)
        return EXIT_OK
    if args.command == "cmi":
        res = ex.run_cmi(cfg, jobs)
        _print_rows(ex.CMI_SUMMARY_COLUMNS, res["summary"])
        return EXIT_OK
    if args.command == "bounds":
        res = ex.run_bound_report(cfg, jobs)
        for cell, rep in res["reports"]:
            print(rep.text())
        return EXIT_VIOLATION if res["violations"] else EXIT_OK
    if args.command == "genquality":
        res = ex.run_genquality(cfg, jobs)
        _print_rows(ex.GEN_COLUMNS, res["rows"])
        return EXIT_VIOLATION if res["violations"] else EXIT_OK
    if args.command == "prior-ab":
        res = ex.run_prior_ab(cfg, jobs)
        _print_rows(ex.AB_SUMMARY_COLUMNS, res["summary"])
        return EXIT_OK
    if args.command == "sweep":
        gap = ex.run_gap_sweep(cfg, jobs)
        bounds = ex.run_bound_report(cfg, jobs)
        gen = ex.run_genquality(cfg, jobs)
        _print_rows(ex.GAP_SUMMARY_COLUMNS, gap.summary)
        print(f"bound violations: {len(bounds['violations'])}; "
              f"generation violations: {len(gen['violations'])}")
        return EXIT_VIOLATION if bounds["violations"] or gen["violations"] else EXIT_OK
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
