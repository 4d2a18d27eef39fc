"""Command line entry point.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 missing artifact.
``STEPGRPO_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..diffnet import load_checkpoint, save_checkpoint
from . import checks, runs
from .config import ConfigError, load

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
THREADS_ENV = "STEPGRPO_THREADS"


class MissingArtifact(RuntimeError):
    pass


def _load_reference(path, exp):
    path = Path(path)
    if not path.is_file() or not Path(str(path) + ".json").is_file():
        raise MissingArtifact(f"checkpoint not found: {path}")
    net, params, _ = load_checkpoint(path)
    if net != exp.net:
        raise ConfigError("net", f"checkpoint {path} was built for {net}, config asks for {exp.net}")
    return params


def _say(msg):
    print(msg, flush=True)


def cmd_pretrain(args):
    exp = load(args.config)
    out = Path(args.out)
    res = runs.run_pretrain(exp)
    save_checkpoint(out / "reference.ckpt", exp.net, res.net.params, role="reference")
    runs.write_csv(out / "pretrain_metrics.csv", runs.PRETRAIN_COLUMNS, res.rows())
    runs.write_json(out / "pretrain_summary.json", {"heldout_loss": res.heldout_loss,
                                                   "heldout_threshold": res.threshold,
                                                   "below_threshold": res.passed,
                                                   "iterations": len(res.losses)})
    _say(f"held-out fm_loss {res.heldout_loss:.4f} (threshold {res.threshold:g}) -> {out / 'reference.ckpt'}")
    return EXIT_OK if res.passed else EXIT_CHECK


def _train_seeds(exp, theta_ref, train, label=None):
    results = []
    for seed in exp.seeds:
        run_id = f"{label or train.method}-s{seed}"
        res = runs.run_training(exp, theta_ref, seed, train, run_id)
        results.append(res)
        _say(f"{run_id}: initial {res.initial_reward:.3f} final {res.final_reward:.3f} "
             f"iterations-to-{exp.threshold:g} {res.reached(exp.threshold)}")
    return results


def cmd_train(args):
    exp = load(args.config)
    theta_ref = _load_reference(args.ckpt, exp)
    out = Path(args.out)
    results = _train_seeds(exp, theta_ref, exp.train)
    header = runs.metrics_header(exp.train.T)
    for res in results:
        runs.write_csv(out / f"seed_{res.seed}" / "metrics.csv", header, res.rows(args.wall_clock))
        runs.save_run_checkpoints(out / f"seed_{res.seed}", exp, res)
    runs.write_json(out / "summary.json", {"threshold": exp.threshold,
                                           "runs": [r.summary(exp.threshold) for r in results]})
    return EXIT_OK


def cmd_compare(args):
    exp = load(args.config)
    labels = [m.strip() for m in args.methods.split(",") if m.strip()]
    if len(labels) < 2:
        raise ConfigError("--methods", "need at least two methods")
    if len(set(labels)) != len(labels):
        raise ConfigError("--methods", "methods must be distinct")
    variants = []
    for label in labels:
        try:
            variants.append(runs.parse_variant(label, exp.train))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--methods {label}", str(exc)) from None
    out = Path(args.out)
    if args.ckpt:
        theta_ref = _load_reference(args.ckpt, exp)
    else:
        pre = runs.run_pretrain(exp)
        theta_ref = pre.net.params
        save_checkpoint(out / "reference.ckpt", exp.net, theta_ref, role="reference")
    by_label = {}
    for label, train in variants:
        results = _train_seeds(exp, theta_ref, train, label)
        by_label[label] = results
        rows = [row for res in results for row in res.rows(args.wall_clock)]
        runs.write_csv(out / label / "metrics.csv", runs.metrics_header(train.T), rows)
    report = runs.compare_summary(by_label, exp.threshold, exp.band)
    runs.write_json(out / "comparison.json", report)
    for name, entry in report["median_iterations_ordering"].items():
        flag = {True: "holds", False: "REGRESSION", None: "undetermined (neither reached)"}[entry["holds"]]
        _say(f"median iterations-to-threshold {name}: {flag}")
    _say(f"final reward spread {report['final_reward_spread']:.4f} (band {exp.band:g})")
    return EXIT_OK


def cmd_profile_gains(args):
    exp = load(args.config)
    theta = _load_reference(args.ckpt, exp)
    if args.n < 1:
        raise ConfigError("--n", "must be >= 1")
    rows = runs.profile_gains(exp, theta, args.n, args.seed)
    runs.write_csv(args.out, runs.PROFILE_COLUMNS, rows)
    _say(f"gain profile over {args.n} groups -> {args.out}")
    return EXIT_OK


def cmd_verify(args):
    ctx = checks.Context(fault=args.inject_fault)
    names = [n for n in checks.CHECKS if args.filter is None or args.filter in n]
    if not names:
        raise ConfigError("--filter", f"no check matches {args.filter!r}")

    def report(res):
        _say(f"{'PASS' if res.passed else 'FAIL'} {res.name:<18} {res.seconds:7.2f}s  {res.detail}")

    results = checks.run_checks(args.filter, ctx, report)
    failed = [r.name for r in results if not r.passed]
    _say(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}"
                                                                          if failed else ""))
    return EXIT_CHECK if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="stepgrpo", description="Stepwise credit assignment for flow GRPO.")
    sub = p.add_subparsers(dest="command", required=True)
    wall = dict(choices=("off", "per-iteration", "cumulative"), default="off",
                help="fill the wall_ms column (breaks byte-identical reruns); default leaves it empty")

    sp = sub.add_parser("pretrain", help="fit the reference policy by flow matching")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="GRPO fine-tuning for every configured seed")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wall-clock", **wall)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("verify", help="run the invariant suite")
    sp.add_argument("--filter", default=None, help="only run checks whose name contains this")
    sp.add_argument("--inject-fault", choices=("gradient",), default=None,
                    help="corrupt analytic gradients by +10%% to confirm the gradient checks bite")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("profile-gains", help="mean |gain| per transition")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_profile_gains)

    sp = sub.add_parser("compare", help="paired runs of several methods on shared seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--methods", required=True,
                    help="comma-separated; each is METHOD[@key=value...], e.g. stepwise-joint@substeps=2")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ckpt", default=None, help="reference checkpoint; pretrained from the config if absent")
    sp.add_argument("--wall-clock", **wall)
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"config error: {THREADS_ENV} must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=limit):
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
