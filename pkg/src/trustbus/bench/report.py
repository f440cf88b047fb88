"""Run reports: per-cycle data, summary statistics, and mode comparison."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field, fields
from decimal import Decimal

from ..errors import ComparisonInvalid

LATENCY_GATE_RATIO = 2.0
DELIVERY_GATE_RATIO = 0.99

CYCLE_COLUMNS = ["producer_id", "seq", "produced_at_ms", "consumed_at_ms", "latency_ms"]


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile of an ascending list."""
    if not sorted_values:
        raise ValueError("no values")
    rank = math.ceil(percentile / 100.0 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


def summarize(values: list[float]) -> dict:
    if not values:
        return {"count": 0}
    ordered = sorted(values)
    return {
        "count": len(ordered),
        "mean_ms": statistics.fmean(ordered),
        "median_ms": statistics.median(ordered),
        "p95_ms": nearest_rank(ordered, 95),
        "p99_ms": nearest_rank(ordered, 99),
        "min_ms": ordered[0],
        "max_ms": ordered[-1],
    }


@dataclass
class RunReport:
    """Everything one scenario run produced.

    ``cycles`` holds the raw rows (also written as CSV); every statistic in
    ``latency`` is recomputable from them. ``attestation_ms`` has one entry
    per handshake: each producer's key fetch plus each consumer attestation
    the vault performed.
    """

    run_id: str
    mode: str
    seed: int
    producers: int
    regions: int
    cycles_per_producer: int
    interval_ms: float
    published: int
    producer_errors: int
    producers_aborted: int
    latency: dict
    attestation_ms: list[float]
    attestation: dict
    broker: dict
    consumer: dict
    vault_audit: dict | None
    aggregates: list[dict]
    region_totals: dict[str, str]
    duration_s: float
    artifacts_dir: str = ""
    csv_path: str = ""
    cycles: list[list] = field(default_factory=list, repr=False)

    @property
    def latencies_ms(self) -> list[float]:
        return [row[4] for row in self.cycles]

    @property
    def delivered_ratio(self) -> float:
        if self.published == 0:
            return 0.0
        return self.broker.get("delivered", 0) / self.published

    def to_obj(self) -> dict:
        obj = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "cycles"}
        obj["latencies_ms"] = self.latencies_ms
        obj["delivered_ratio"] = self.delivered_ratio
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "RunReport":
        known = {f.name for f in fields(cls)}
        data = {k: v for k, v in obj.items() if k in known}
        report = cls(**data)
        if not report.cycles and obj.get("latencies_ms"):
            # Summary-only reports (loaded from JSON) keep the latencies but
            # not the per-producer rows; synthesize rows so latencies_ms works.
            report.cycles = [["", 0, 0.0, 0.0, value] for value in obj["latencies_ms"]]
        return report

    @classmethod
    def from_file(cls, path: str) -> "RunReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    def write(self, report_path: str, csv_path: str) -> None:
        self.csv_path = csv_path
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CYCLE_COLUMNS)
            writer.writerows(self.cycles)
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_obj(), fh, indent=2)
            fh.write("\n")


def build_report(
    *,
    run_id: str,
    mode: str,
    seed: int,
    producers: int,
    regions: int,
    cycles_per_producer: int,
    interval_ms: float,
    producer_summaries: list[dict],
    consumer_reports: list[dict],
    broker_stats: dict,
    vault_audit: dict | None,
    duration_s: float,
    artifacts_dir: str = "",
) -> RunReport:
    cycles: list[list] = []
    consumer_totals = {
        "notifications": 0,
        "received": 0,
        "accepted": 0,
        "duplicates_discarded": 0,
        "poison": 0,
    }
    aggregates: list[dict] = []
    for report in consumer_reports:
        cycles.extend(report.get("timings", []))
        aggregates.extend(report.get("aggregates", []))
        for key in consumer_totals:
            consumer_totals[key] += report.get("counters", {}).get(key, 0)
    cycles.sort(key=lambda row: (row[0], row[1]))
    aggregates.sort(key=lambda w: (w["region"], w["window_start"]))

    # Totals stay exact: windows carry decimal strings, never floats.
    region_totals: dict[str, str] = {}
    for window in aggregates:
        current = Decimal(region_totals.get(window["region"], "0"))
        region_totals[window["region"]] = str(current + Decimal(window["total_wh"]))

    attestation_ms = [
        s["attestation_ms"] for s in producer_summaries if s.get("attestation_ms") is not None
    ]
    if vault_audit:
        attestation_ms.extend(vault_audit.get("attestation_ms", []))

    broker_totals = broker_stats.get("notifications", broker_stats)
    return RunReport(
        run_id=run_id,
        mode=mode,
        seed=seed,
        producers=producers,
        regions=regions,
        cycles_per_producer=cycles_per_producer,
        interval_ms=interval_ms,
        published=sum(s.get("published", 0) for s in producer_summaries),
        producer_errors=sum(s.get("errors", 0) for s in producer_summaries),
        producers_aborted=sum(1 for s in producer_summaries if s.get("aborted")),
        latency=summarize([row[4] for row in cycles]),
        attestation_ms=attestation_ms,
        attestation=summarize(attestation_ms),
        broker={
            "enqueued": broker_totals.get("enqueued", 0),
            "delivered": broker_totals.get("delivered", 0),
            "dropped": broker_totals.get("dropped", 0),
            "retries": broker_totals.get("retries", 0),
        },
        consumer=consumer_totals,
        vault_audit=vault_audit,
        aggregates=aggregates,
        region_totals=region_totals,
        duration_s=duration_s,
        artifacts_dir=artifacts_dir,
        cycles=cycles,
    )


def evaluate_run_gates(report: RunReport) -> list[tuple[str, bool, str]]:
    """Acceptance gates a single run must clear: everyone published, at
    least 99% of updates were delivered, and in secure mode the vault served
    each key exactly once."""
    gates = [
        (
            "all producers completed",
            report.producers_aborted == 0,
            f"{report.producers_aborted} aborted of {report.producers}",
        ),
        (
            "delivery ratio >= 99%",
            report.published > 0 and report.delivered_ratio >= DELIVERY_GATE_RATIO,
            f"{report.broker.get('delivered', 0)}/{report.published} delivered",
        ),
    ]
    if report.mode == "secure":
        counters = (report.vault_audit or {}).get("counters", {})
        served_once = (
            counters.get("public_key_served") == report.producers
            and counters.get("private_key_served") == report.regions
        )
        gates.append(
            (
                "one-time key acquisition",
                served_once,
                f"public={counters.get('public_key_served')} (want {report.producers}), "
                f"private={counters.get('private_key_served')} (want {report.regions})",
            )
        )
    return gates


def compare_modes(report_plain: RunReport | dict, report_secure: RunReport | dict) -> dict:
    """Median overhead of one report over another.

    Both runs must have used the same seed and the same population, or the
    medians measure different workloads and the comparison is meaningless.
    Flags ``fail`` when the secure median exceeds the latency gate.
    """
    plain = report_plain.to_obj() if isinstance(report_plain, RunReport) else report_plain
    secure = report_secure.to_obj() if isinstance(report_secure, RunReport) else report_secure
    for key in ("seed", "producers", "cycles_per_producer"):
        if plain.get(key) != secure.get(key):
            raise ComparisonInvalid(
                f"{key} differs between reports: {plain.get(key)!r} vs {secure.get(key)!r}"
            )
    plain_median = plain["latency"].get("median_ms")
    secure_median = secure["latency"].get("median_ms")
    if plain_median is None or secure_median is None:
        raise ComparisonInvalid("both reports need a median latency")
    if plain_median <= 0:
        raise ComparisonInvalid("plain median must be positive to form a ratio")
    ratio = secure_median / plain_median
    return {
        "plain_median_ms": plain_median,
        "secure_median_ms": secure_median,
        "overhead_ms": secure_median - plain_median,
        "overhead_pct": (ratio - 1.0) * 100.0,
        "ratio": ratio,
        "gate_ratio": LATENCY_GATE_RATIO,
        "fail": ratio > LATENCY_GATE_RATIO,
    }
