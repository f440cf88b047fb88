"""Command line for the benchmark harness.

Three subcommands: ``run`` executes one scenario from a config file,
``compare`` sets two run reports side by side and applies the latency gate,
``sweep`` repeats a scenario over ascending producer counts. Exit code 0
means every applicable acceptance gate passed. BENCH_SEED overrides the
config seed for all subcommands that run scenarios.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ComparisonInvalid, SetupFailed
from .config import ScenarioConfig
from .harness import run_scenario, stress_sweep
from .report import RunReport, compare_modes, evaluate_run_gates


def _print_report(report: RunReport) -> None:
    latency = report.latency
    print(
        f"run {report.run_id}: mode={report.mode} producers={report.producers} "
        f"cycles={report.cycles_per_producer} regions={report.regions} seed={report.seed}"
    )
    print(
        f"  published={report.published} delivered={report.broker.get('delivered', 0)} "
        f"({report.delivered_ratio:.2%}) dropped={report.broker.get('dropped', 0)} "
        f"duplicates={report.consumer.get('duplicates_discarded', 0)} "
        f"poison={report.consumer.get('poison', 0)}"
    )
    if latency.get("count"):
        print(
            f"  latency ms: median={latency['median_ms']:.3f} mean={latency['mean_ms']:.3f} "
            f"p95={latency['p95_ms']:.3f} p99={latency['p99_ms']:.3f} n={latency['count']}"
        )
    if report.attestation.get("count"):
        print(
            f"  attestation ms: mean={report.attestation['mean_ms']:.3f} "
            f"median={report.attestation['median_ms']:.3f} "
            f"over {report.attestation['count']} handshakes"
        )
    print(f"  artifacts: {report.artifacts_dir}")


def _print_gates(gates: list[tuple[str, bool, str]]) -> bool:
    all_ok = True
    for name, ok, detail in gates:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok = all_ok and ok
    return all_ok


def _cmd_run(args: argparse.Namespace) -> int:
    config = ScenarioConfig.from_file(args.config)
    try:
        report = run_scenario(config)
    except SetupFailed as exc:
        print(f"setup failed: {exc}", file=sys.stderr)
        return 1
    _print_report(report)
    return 0 if _print_gates(evaluate_run_gates(report)) else 1


def _cmd_compare(args: argparse.Namespace) -> int:
    def load(path: str) -> dict:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    try:
        summary = compare_modes(load(args.plain), load(args.secure))
    except ComparisonInvalid as exc:
        print(f"reports not comparable: {exc}", file=sys.stderr)
        return 2
    print(
        f"plain median {summary['plain_median_ms']:.3f} ms, "
        f"secure median {summary['secure_median_ms']:.3f} ms"
    )
    print(
        f"overhead {summary['overhead_ms']:+.3f} ms ({summary['overhead_pct']:+.1f}%), "
        f"ratio {summary['ratio']:.3f} (gate {summary['gate_ratio']:.1f}x)"
    )
    if summary["fail"]:
        print("[FAIL] secure median exceeds the latency gate")
        return 1
    print("[PASS] secure median within the latency gate")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    try:
        counts = [int(part) for part in args.counts.split(",") if part.strip()]
    except ValueError:
        print(f"--counts must be comma-separated integers, got {args.counts!r}", file=sys.stderr)
        return 2
    if not counts:
        print("--counts must name at least one producer count", file=sys.stderr)
        return 2
    with open(args.config, "r", encoding="utf-8") as fh:
        template = json.load(fh)
    # The sweep supplies producer counts; the config is a template for the rest.
    template["producers"] = max(counts)
    config = ScenarioConfig.from_obj(template)
    try:
        sweep = stress_sweep(counts, config)
    except ValueError as exc:
        print(f"invalid sweep: {exc}", file=sys.stderr)
        return 2
    print(f"{'producers':>9}  {'median ms':>10}  {'p95 ms':>10}  {'delivered':>16}  status")
    all_ok = True
    for level in sweep["levels"]:
        if level["status"] != "ok":
            print(f"{level['producers']:>9}  {'-':>10}  {'-':>10}  {'-':>16}  {level['status']}")
            all_ok = False
            continue
        ok = level["delivered_ratio"] >= 0.99
        all_ok = all_ok and ok
        delivered = f"{level['delivered']}/{level['published']} ({level['delivered_ratio']:.1%})"
        print(
            f"{level['producers']:>9}  {level['median_latency_ms']:>10.3f}  "
            f"{level['p95_latency_ms']:>10.3f}  {delivered:>16}  "
            f"{'ok' if ok else 'under-delivered'}"
        )
    if sweep["plot"]:
        print(f"plot: {sweep['plot']}")
    print(f"table: {sweep['table']}")
    return 0 if all_ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench", description="Run and compare telemetry benchmark scenarios."
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run one scenario to completion")
    run_parser.add_argument("--config", required=True, help="scenario config JSON")
    run_parser.set_defaults(func=_cmd_run)

    compare_parser = commands.add_parser("compare", help="compare two run reports")
    compare_parser.add_argument("plain", help="baseline report.json")
    compare_parser.add_argument("secure", help="secured report.json")
    compare_parser.set_defaults(func=_cmd_compare)

    sweep_parser = commands.add_parser("sweep", help="run ascending producer counts")
    sweep_parser.add_argument("--counts", required=True, help="e.g. 100,200,300,400")
    sweep_parser.add_argument("--config", required=True, help="base scenario config JSON")
    sweep_parser.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
