"""Command line entry point: ``ptdl {run,accountant,trust-bound,verify,compare}``."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import dp, harness
from .coordinator import MEDIAN_RULES, TrustBoundQuery, min_admissible_t, trust_bound
from .ledger import Ledger


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    rows = harness.run_experiment(cfg, args.out)
    last = rows[-1]
    print(f"rounds={last.round} acr={last.acr} accuracy={last.accuracy:.4f} bandwidth_bytes={last.bandwidth_bytes}")
    print(f"wrote {Path(args.out) / 'metrics.csv'}")
    return 0


def _cmd_accountant(args) -> int:
    curve = dp.rdp_ledger(args.q, args.sigma)
    composed = dp.compose(curve, args.steps)
    spend = dp.to_dp(composed, args.delta)
    print(f"epsilon {spend.epsilon:.6f}")
    print(f"delta {spend.delta:g}")
    print(f"optimal_alpha {spend.optimal_alpha:g}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "eps_rdp"])
            for a, r in zip(composed.alpha_grid, composed.rdp):
                w.writerow([f"{a:g}", f"{r:.12g}"])
    return 0


def _cmd_trust_bound(args) -> int:
    try:
        q = TrustBoundQuery(args.m, args.t, args.beta)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"bound {trust_bound(q, args.rule):.6g}")
    print(f"rule {args.rule}")
    print(f"min_admissible_t {min_admissible_t(args.beta):.6f}")
    return 0


def _cmd_verify(args) -> int:
    try:
        ledger = Ledger.load(args.ledger)
    except (OSError, ValueError) as exc:
        print(f"FAILED: {exc}")
        return 1
    if ledger.verify():
        print(f"OK {len(ledger)} records")
        return 0
    print("FAILED: chain does not verify")
    return 1


def _cmd_compare(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    kinds = [k.strip() for k in args.topologies.split(",") if k.strip()]
    table = harness.compare_topologies(cfg, kinds)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["kind", *harness.CSV_HEADER])
        for row in table:
            eps = row["epsilon"]
            w.writerow(
                [
                    row["kind"],
                    row["round"],
                    row["acr"],
                    f"{row['accuracy']:.6f}",
                    row["bandwidth_bytes"],
                    row["accepted"],
                    row["rejected"],
                    "" if eps is None else f"{eps:.6f}",
                ]
            )
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptdl", description="Private and trustable decentralized learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("accountant", help="epsilon of the sampled Gaussian mechanism after N steps")
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--csv", help="also write the composed RDP curve (alpha,eps_rdp)")
    a.set_defaults(func=_cmd_accountant)

    t = sub.add_parser("trust-bound", help="deviation bound of the median under collusion")
    t.add_argument("--m", type=int, required=True)
    t.add_argument("--t", type=float, required=True)
    t.add_argument("--beta", type=float, required=True)
    t.add_argument("--rule", choices=MEDIAN_RULES, default="statement")
    t.set_defaults(func=_cmd_trust_bound)

    v = sub.add_parser("verify", help="re-verify an exported ledger")
    v.add_argument("--ledger", required=True)
    v.set_defaults(func=_cmd_verify)

    c = sub.add_parser("compare", help="same experiment on several topologies")
    c.add_argument("--config", required=True)
    c.add_argument("--topologies", default="chain,tree,star")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", help="CSV path (default stdout)")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, dp.IntegrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
