"""Operator command line: validate / solve / simulate / verify / example.

Exit codes are fixed for CI gating: 0 success, 2 regularity failure,
3 malformed config or unreadable input, 4 enumeration budget exceeded,
5 table-cache fingerprint mismatch, 6 failed verification check.
Every output artifact embeds the run manifest; re-running a manifest with
the same seed reproduces outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, config_io, dp, oracle, simulate
from .dp import ValueTables, build_value_tables, continuation_gap
from .errors import MalformedConfig, StateSpaceTooLarge, TableMismatch
from .market import build_example_config, reserve_price, validate_config
from .mechanism import NOT_SERVED, Mechanism

EXIT_OK = 0
EXIT_REGULARITY = 2
EXIT_MALFORMED = 3
EXIT_TOO_LARGE = 4
EXIT_STALE_CACHE = 5
EXIT_VERIFY_FAILED = 6


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config: str | None
    cache: str | None
    seed: int | None
    backend: str | None
    out: str | None
    replications: int | None
    version: str = __version__

    def to_json(self) -> dict:
        return asdict(self)


def _resolve_seed(args) -> int | None:
    env = os.environ.get("FLEXMARKET_SEED")
    if env is not None:
        return int(env)
    return getattr(args, "seed", None)


def cmd_validate(args) -> int:
    try:
        cfg = config_io.load_config(args.config)
        report = validate_config(cfg)
    except MalformedConfig as exc:
        print(f"malformed config: {exc}")
        return EXIT_MALFORMED
    for note in report.notes:
        print(f"note: {note}")
    if report.passed:
        print(f"regularity check passed ({cfg.horizon} periods, {cfg.varieties} varieties, "
              f"{cfg.grid.size}-point grid)")
        return EXIT_OK
    print(f"regularity check FAILED with {len(report.violations)} finding(s):")
    for v in report.violations[:20]:
        print(f"  {v.kind}: t={v.t} level={v.level} grid_index={v.grid_index} {v.detail}")
    if len(report.violations) > 20:
        print(f"  ... and {len(report.violations) - 20} more")
    return EXIT_REGULARITY


def cmd_solve(args) -> int:
    seed = _resolve_seed(args)
    try:
        cfg = config_io.load_config(args.config)
    except MalformedConfig as exc:
        print(f"malformed config: {exc}")
        return EXIT_MALFORMED
    report = validate_config(cfg)
    if not report.passed:
        print(f"warning: config fails regularity at {len(report.violations)} point(s); "
              "solving anyway")
    try:
        tables = build_value_tables(
            cfg, backend=args.backend,
            samples=args.samples if args.backend == "mc" else None,
            seed=seed if args.backend == "mc" else None,
            profile_budget=args.budget,
        )
    except StateSpaceTooLarge as exc:
        print(f"state space too large for the exact backend: {exc}")
        return EXIT_TOO_LARGE
    tables.save(args.cache)
    print(f"tables written to {args.cache} (fingerprint {tables.fingerprint[:12]}...)")
    for t in sorted(tables.states):
        layer = tables.values[t]
        states = tables.states[t]
        lo, hi = min(layer.values()), max(layer.values())
        print(f"  t={t}: {len(states)} supply states, values in [{lo:.6f}, {hi:.6f}]")
        if len(states) <= 8:
            for y in states:
                print(f"    C_{t}({y}) = {layer[y]:.10f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    if seed is None:
        seed = 0
    try:
        cfg = config_io.load_config(args.config)
    except MalformedConfig as exc:
        print(f"malformed config: {exc}")
        return EXIT_MALFORMED
    try:
        tables = ValueTables.load(args.cache, cfg)
    except TableMismatch as exc:
        print(f"stale table cache: {exc}")
        return EXIT_STALE_CACHE
    except OSError as exc:
        print(f"cannot read table cache: {exc}")
        return EXIT_MALFORMED

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        subcommand="simulate", config=str(args.config), cache=str(args.cache),
        seed=seed, backend=tables.backend, out=str(outdir),
        replications=args.replications,
    ).to_json()

    mech = Mechanism(tables)
    # one batch of episodes feeds both the trace file and the estimates
    revenues, surpluses = [], []
    with open(outdir / "traces.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("# manifest: " + json.dumps(manifest, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(simulate.TRACE_COLUMNS)
        for rep in range(args.replications):
            rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
            trace = simulate._run_episode(mech, rng)
            revenues.append(trace.total_revenue)
            surpluses.append(trace.total_virtual_surplus)
            writer.writerows(simulate.trace_rows(rep, trace))
    est = simulate.RevenueEstimate(revenues, surpluses, args.replications, seed)

    optimal = simulate.expected_virtual_surplus(tables)
    myopic = simulate.expected_virtual_surplus(simulate.build_myopic_tables(cfg))

    with open(outdir / "revenue.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("# manifest: " + json.dumps(manifest, sort_keys=True) + "\n")
        fh.write("replications,revenue_mean,revenue_stderr,virtual_surplus_mean,"
                 "virtual_surplus_stderr,exact_virtual_surplus,myopic_virtual_surplus\n")
        fh.write(f"{args.replications},{est.mean!r},{est.stderr!r},{est.virtual_mean!r},"
                 f"{est.virtual_stderr!r},{optimal!r},{myopic!r}\n")

    bic_reports = [
        simulate.bic_audit(cfg, tables, simulate.AuditProbe.default(cfg, t),
                           args.replications, seed, mech=mech).to_json()
        for t in range(1, cfg.horizon + 1)
    ]
    simulate.write_json_report(outdir / "bic_audit.json", {"audits": bic_reports}, manifest)
    ir = simulate.ir_audit(cfg, tables, args.replications, seed, mech=mech)
    simulate.write_json_report(outdir / "ir_audit.json", ir.to_json(), manifest)

    print(f"revenue {est.mean:.6f} +/- {est.stderr:.6f} over {args.replications} episodes")
    print(f"virtual surplus {est.virtual_mean:.6f} +/- {est.virtual_stderr:.6f} "
          f"(exact {optimal:.6f}, myopic baseline {myopic:.6f})")
    print(f"outputs in {outdir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = _resolve_seed(args) or 0
    report = oracle.run_verification(
        instances=args.instances, master_seed=seed, matrix_budget=args.budget,
    )
    if args.config:
        # audit the user's own instance alongside the random family
        try:
            cfg = config_io.load_config(args.config)
        except MalformedConfig as exc:
            print(f"malformed config: {exc}")
            return EXIT_MALFORMED
        own = oracle.verify_instance(cfg, seed=-1, matrix_budget=args.budget)
        for check in own:
            check.detail = f"config {args.config}"
        report["checks"].extend(c.to_json() for c in own)
        report["passed"] = report["passed"] and all(c.passed for c in own)
        if not all(c.passed for c in own):
            report["failed_seeds"].append(-1)
    manifest = RunManifest(
        subcommand="verify", config=args.config, cache=None, seed=seed,
        backend="exact", out=args.out, replications=args.instances,
    ).to_json()
    report["manifest"] = manifest
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    failed = [c for c in report["checks"] if not c["passed"]]
    for c in failed:
        print(f"FAILED {c['name']} on instance seed {c['instance_seed']} "
              f"(worst violation {c['worst']:.3e})")
    n_checks = len(report["checks"])
    if failed:
        print(f"{len(failed)}/{n_checks} checks failed "
              f"(instance seeds {report['failed_seeds']})")
        return EXIT_VERIFY_FAILED
    print(f"all {n_checks} checks passed on {args.instances} instances (seed {seed})")
    return EXIT_OK


_EXAMPLE_ROWS = (
    # (label, getter, reference value)
    ("reserve price, level 1, t=2", "res_1_2", 0.36),
    ("reserve price, level 2, t=2", "res_2_2", 0.29),
    ("holding cost rho, level 1, t=1", "rho_1_1", 0.037),
    ("holding cost rho, level 2, t=1", "rho_2_1", 0.0),
    ("critical value, level 1, t=1", "bar_1_1", 0.39),
    ("critical value, level 2, t=1", "bar_2_1", 0.29),
)


def example_quantities(grid_size: int = 1001) -> dict:
    """Worked two-period instance: solve and pull out its headline numbers."""
    cfg = build_example_config(alpha=(2.0, 3.0), p=0.5, horizon=2, grid_size=grid_size)
    tables = build_value_tables(cfg)
    mech = Mechanism(tables)
    bar11 = mech.payment_threshold(1, [], 1, (1, 1))
    bar21 = mech.payment_threshold(1, [], 2, (1, 1))
    assert bar11 is not NOT_SERVED and bar21 is not NOT_SERVED
    return {
        "res_1_2": reserve_price(cfg, 2, 1),
        "res_2_2": reserve_price(cfg, 2, 2),
        "rho_1_1": continuation_gap(tables, 1, (1, 1), 1),
        "rho_2_1": continuation_gap(tables, 1, (1, 1), 2),
        "bar_1_1": bar11,
        "bar_2_1": bar21,
    }


def cmd_example(args) -> int:
    got = example_quantities()
    print("two-period worked instance (alpha = 2 and 3, arrival probability 0.5, "
          "1001-point grid)")
    print(f"{'quantity':<34} {'computed':>12} {'reference':>10} {'delta':>12}")
    for label, key, ref in _EXAMPLE_ROWS:
        val = got[key]
        print(f"{label:<34} {val:>12.6f} {ref:>10.3f} {val - ref:>12.2e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexmarket",
        description="Optimal dynamic-auction solver and market simulator "
                    "for flexible consumers under stochastic supply.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="structural and regularity checks on a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("solve", help="build and persist the value tables")
    p.add_argument("--config", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--backend", choices=("exact", "mc"), default="exact")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--budget", type=int, default=dp.DEFAULT_PROFILE_BUDGET)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("simulate", help="run seeded episodes and audits")
    p.add_argument("--config", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replications", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="run the brute-force oracle suite")
    p.add_argument("--config", default=None,
                   help="also audit this config's own tables (reported as instance seed -1)")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=oracle.DEFAULT_MATRIX_BUDGET)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("example", help="reproduce the worked two-period instance")
    p.set_defaults(fn=cmd_example)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
