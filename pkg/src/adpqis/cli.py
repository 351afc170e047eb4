"""Command line interface: train, oracle, evaluate, sweep, example1, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .approx import FeatureSpec, QApprox
from .example1 import run_example1
from .experiments import (AGGREGATE_HEADER, SUMMARY_HEADER, TIMING_HEADER, ConfigError,
                          aggregate, load_experiment, read_csv, run_sweep, write_csv)
from .gep import DatasetError, GepProblem, load_instance
from .mdp import ContractError
from .oracle import backward_induction, build_tree, percent_gap, simulate_policy
from .qlearn import extract_policy, run

log = logging.getLogger("adpqis")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# flag dest -> RunConfig field
_RUN_FLAGS = {"sampler": "sampler", "epsilon": "epsilon", "epsilon_initial": "epsilon_initial",
              "epsilon_final": "epsilon_final", "iterations": "iterations", "samples": "samples",
              "reeval_every": "reeval_every", "lam": "lam", "gamma": "gamma", "seed": "seed"}


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get("ADPQIS_OUT_DIR") or "out")


def _overrides(args) -> dict:
    ov = {field: getattr(args, dest) for dest, field in _RUN_FLAGS.items()
          if getattr(args, dest, None) is not None}
    if getattr(args, "dataset", None):
        ov["dataset"] = args.dataset
    if getattr(args, "replications", None) is not None:
        ov["replications"] = args.replications
    return ov


def _spec(args):
    return load_experiment(args.config, _overrides(args))


def cmd_train(args) -> int:
    spec = _spec(args)
    instance = load_instance(spec.dataset)
    problem = GepProblem(instance)
    result = run(problem, spec.run)
    out = _out_dir(args)
    meta = spec.to_dict()
    coeffs = result.report.coefficients
    n_feat = len(next(iter(coeffs.values())))
    write_csv(out / "coeffs.csv", ["stage"] + [f"theta_{i}" for i in range(n_feat)],
              ([t] + list(coeffs[t]) for t in sorted(coeffs)), meta)
    rep = result.report
    write_csv(out / "report.csv", ["k", "stage1_q_normalized", "q_min_1", "q_max_1", "proposals"],
              ([k + 1, v, lo, hi, int(p)] for k, (v, lo, hi, p) in
               enumerate(zip(rep.stage1_normalized, rep.q_min1, rep.q_max1, rep.proposals))), meta)
    archive_rows = []
    for t in range(1, problem.horizon + 1):
        r = np.array([rec.reward for rec in result.archive.records(t)])
        archive_rows.append([t, len(r), r.min(), float(np.mean(r)), r.max()])
    write_csv(out / "archive.csv", ["stage", "records", "reward_min", "reward_mean", "reward_max"],
              archive_rows, meta)
    if args.timing:
        write_csv(out / "timing.csv", ["sampling_s", "evaluation_s", "other_s"],
                  [[rep.timing["sampling"], rep.timing["evaluation"], rep.timing["other"]]], meta)
    shares = extract_policy(result.approximations, spec.run.resolution,
                            spec.run.refine_steps)(1, problem.initial_state())
    print(f"trained {spec.run.sampler} for {spec.run.iterations} iterations")
    print("stage-1 shares: " + " ".join(f"{g.name}={x:.3f}" for g, x in
                                        zip(instance.technologies, shares)))
    print(f"wrote {out}/coeffs.csv, report.csv, archive.csv")
    return EXIT_OK


def cmd_oracle(args) -> int:
    spec = _spec(args)
    instance = load_instance(spec.dataset)
    tree = build_tree(instance, spec.oracle.grid_step)
    sol = backward_induction(instance, tree, spec.oracle.shares_step)
    out = _out_dir(args)
    names = [g.name for g in instance.technologies]
    write_csv(out / "oracle.csv", ["grid_step", "shares_step", "cost"] + [f"share_{n}" for n in names],
              [[spec.oracle.grid_step, spec.oracle.shares_step, sol.cost] + list(sol.stage1_shares)],
              {"dataset": spec.dataset, "oracle": spec.to_dict()["oracle"]})
    print(f"optimal expected cost {sol.cost:.6e}")
    print("stage-1 shares: " + " ".join(f"{n}={x:.3f}" for n, x in zip(names, sol.stage1_shares)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = _spec(args)
    instance = load_instance(spec.dataset)
    problem = GepProblem(instance)
    path = Path(args.coeffs) if args.coeffs else _out_dir(args) / "coeffs.csv"
    if not path.exists():
        raise ConfigError("coefficient file not found", str(path))
    header, rows = read_csv(path)
    fspec = FeatureSpec(*problem.feature_bounds(), n_actions=problem.n_actions)
    try:
        approx = {int(r[0]): QApprox(int(r[0]), fspec, np.array([float(x) for x in r[1:]]))
                  for r in rows}
    except (ValueError, ContractError) as exc:
        raise ConfigError(f"bad coefficient file: {exc}", str(path)) from None
    if sorted(approx) != list(range(1, problem.horizon + 1)):
        raise ConfigError("coefficient file must hold one row per stage", str(path))
    tree = build_tree(instance, spec.oracle.grid_step)
    sol = backward_induction(instance, tree, spec.oracle.shares_step)
    policy = extract_policy(approx, spec.run.resolution, spec.run.refine_steps)
    cost = simulate_policy(instance, tree, policy)
    gap = percent_gap(cost, sol.cost)
    write_csv(_out_dir(args) / "evaluation.csv", ["policy_cost", "oracle_cost", "percent_gap"],
              [[cost, sol.cost, gap]], spec.to_dict())
    print(f"policy cost {cost:.6e}  oracle cost {sol.cost:.6e}  gap {gap:.4f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _spec(args)
    oracle_cost, rows = run_sweep(spec, jobs=args.jobs)
    out = _out_dir(args)
    meta = spec.to_dict()
    write_csv(out / "summary.csv", SUMMARY_HEADER, (r.csv_row() for r in rows), meta)
    if args.timing:
        write_csv(out / "timing.csv", TIMING_HEADER,
                  ([r.cell, r.replication, r.timing.get("sampling"), r.timing.get("evaluation"),
                    r.timing.get("other")] for r in rows), meta)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} rows ({failed} failed); oracle cost {oracle_cost:.6e}; "
          f"seeds {spec.base_seed}..{spec.base_seed + spec.replications - 1} reused in every cell")
    print(f"wrote {out}/summary.csv")
    return EXIT_OK


def cmd_example1(args) -> int:
    res = run_example1(samples=args.samples, iterations=args.iterations, seed=args.seed,
                       learn=args.learn)
    first, edges = res.histogram(1, args.bins)
    last, _ = res.histogram(args.iterations, args.bins)
    write_csv(_out_dir(args) / "example1.csv", ["bin_lo", "bin_hi", "first_count", "last_count"],
              ([lo, hi, int(a), int(b)] for lo, hi, a, b in zip(edges[:-1], edges[1:], first, last)),
              {"samples": args.samples, "iterations": args.iterations, "seed": args.seed,
               "learn": args.learn, "bins": args.bins})
    c1, cK = res.concentration(1), res.concentration(args.iterations)
    ratio = cK / c1 if c1 > 0 else float("inf")
    print(f"share within 1 of x=5: first {c1:.3f}, last {cK:.3f}, ratio {ratio:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.summary)
    if not path.exists():
        raise ConfigError("summary file not found", str(path))
    header, rows = read_csv(path)
    try:
        stats, malformed = aggregate(header, rows)
    except ValueError as exc:
        raise ConfigError(str(exc), str(path)) from None
    out = _out_dir(args)
    meta = {"summary": path.read_text()}
    write_csv(out / "aggregate.csv", AGGREGATE_HEADER,
              ([c, a, p, s.n, s.min, s.p05, s.q25, s.median, s.q75, s.p95, s.max]
               for c, a, p, s in stats), meta)
    write_csv(out / "boxplot.csv", ["cell", "algorithm", "whisker_lo", "box_lo", "median",
                                    "box_hi", "whisker_hi"],
              ([c, a, s.p05, s.q25, s.median, s.q75, s.p95] for c, a, _, s in stats), meta)
    for c, a, p, s in stats:
        print(f"cell {c} {a} {p}: min {s.min:.4f} med {s.median:.4f} max {s.max:.4f} (n={s.n})")
    if malformed:
        print(f"warning: skipped {malformed} malformed row(s)", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adpqis", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"adpqis {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", help="JSON experiment file")
        sp.add_argument("--dataset", help="GEP dataset JSON (default: bundled)")
        sp.add_argument("--out-dir", help="output directory (default: $ADPQIS_OUT_DIR or ./out)")
        if not run_flags:
            return
        sp.add_argument("--sampler", choices=["qis", "qis-re", "eps-greedy", "eps-decay"])
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--epsilon-initial", type=float)
        sp.add_argument("--epsilon-final", type=float)
        sp.add_argument("--iterations", type=int, help="K")
        sp.add_argument("--samples", type=int, help="M")
        sp.add_argument("--reeval-every", type=int, help="bounds reevaluation period for qis-re")
        sp.add_argument("--lambda", dest="lam", type=float, help="TD step")
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="run Q-learning and write coefficients and traces")
    common(sp)
    sp.add_argument("--timing", action="store_true", help="also write wall-clock timing.csv")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("oracle", help="solve the scenario-tree benchmark")
    common(sp, run_flags=False)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("evaluate", help="score trained coefficients against the benchmark")
    common(sp)
    sp.add_argument("--coeffs", help="coefficient CSV (default: <out-dir>/coeffs.csv)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="run every sweep cell for each replication")
    common(sp)
    sp.add_argument("--replications", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.add_argument("--timing", action="store_true", help="also write wall-clock timing.csv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("example1", help="one-dimensional accept-reject demo")
    sp.add_argument("--samples", type=int, default=1000, help="M")
    sp.add_argument("--iterations", type=int, default=5, help="K")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--learn", action="store_true",
                    help="score proposals with a learned approximation instead of the true Q")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_example1)

    sp = sub.add_parser("report", help="aggregate a sweep summary")
    sp.add_argument("summary", help="summary.csv written by sweep")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
