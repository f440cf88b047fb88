"""Scenario execution: provision, launch, publish, collect, report.

Secure mode brings up the identity manager, the vault, and one enforcement
proxy in front of both the broker and the vault; plain mode runs the broker
and agents alone. Producers run as one pooled process in two phases so that
every region's key pair exists in the vault before consumers come up and
ask for the private side, and so no producer publishes before every
consumer's subscription is in place.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
import shutil
import time
import uuid
from dataclasses import replace
from pathlib import Path

from ..attestation import EnclaveIdentity, generate_root_keypair
from ..envelope import _b64
from ..errors import SetupFailed, TrustbusError
from ..httpclient import HttpClient
from .config import ScenarioConfig
from .report import RunReport, build_report
from .topology import Topology

log = logging.getLogger(__name__)

VAULT_CODE_IDENTITY = "key-vault-v1"
CONSUMER_CODE_IDENTITY = "telemetry-aggregator-v1"

_DRAIN_POLL_S = 0.05


class _TrustMaterial:
    """Per-run roots of trust: verification root, endorsed identities,
    deployment sealing secret, and machine-account passwords."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.avs_root_private, self.avs_root_public = generate_root_keypair()
        self.vault_identity = EnclaveIdentity.provision(
            VAULT_CODE_IDENTITY, self.avs_root_private
        )
        # Consumers all run the same aggregator code, so they share one
        # measurement; each still gets its own endorsed signing key.
        self.consumer_identities = [
            EnclaveIdentity.provision(CONSUMER_CODE_IDENTITY, self.avs_root_private)
            for _ in range(config.regions)
        ]
        self.deployment_secret = os.urandom(32)
        self.passwords: dict[str, str] = {}
        for index in range(config.producers):
            self.passwords[config.producer_id(index)] = secrets.token_urlsafe(12)
        for region in range(config.regions):
            self.passwords[config.consumer_id(region)] = secrets.token_urlsafe(12)

    def credentials(self, config: ScenarioConfig) -> list[dict]:
        records = []
        for index in range(config.producers):
            username = config.producer_id(index)
            records.append(
                {"username": username, "password": self.passwords[username], "roles": ["producer"]}
            )
        for region in range(config.regions):
            username = config.consumer_id(region)
            records.append(
                {"username": username, "password": self.passwords[username], "roles": ["consumer"]}
            )
        return records


def _get_json(url: str, path: str, timeout: float = 10.0) -> dict:
    client = HttpClient(url, timeout=timeout)
    try:
        response = client.get(path)
    finally:
        client.close()
    if response.status != 200:
        raise SetupFailed(f"GET {url}{path} returned {response.status}")
    return response.json()


def _start_services(topology: Topology, trust: _TrustMaterial | None) -> dict[str, str]:
    """Launch the mode's services; returns the URLs agents should use."""
    config = topology.config
    wire = topology.wire_dir
    state = topology.state_dir

    broker = topology.start_service(
        "broker",
        "trustbus.broker",
        {
            "persist_path": str(state / "broker.jsonl"),
            "wire_log": str(wire / "broker.wire"),
        },
    )
    urls = {"broker": broker.url, "broker_for_agents": broker.url}
    if trust is None:
        return urls

    idm = topology.start_service(
        "idm",
        "trustbus.idm",
        {
            "credentials": trust.credentials(config),
            "pbkdf2_iterations": config.pbkdf2_iterations,
        },
    )
    vault = topology.start_service(
        "vault",
        "trustbus.vault",
        {
            "identity": trust.vault_identity.to_obj(),
            "avs_root_public": _b64(trust.avs_root_public),
            "expected_consumer_measurement": _b64(trust.consumer_identities[0].measurement),
            "deployment_secret": _b64(trust.deployment_secret),
            "persist_path": str(state / "vault-keys.jsonl"),
            "wire_log": str(wire / "vault.wire"),
        },
    )
    broker_pep = topology.start_service(
        "broker-pep",
        "trustbus.pep",
        {
            "upstream_url": broker.url,
            "idm_url": idm.url,
            "required_role": [
                {"method": "POST", "path": "/v2/entities", "role": "producer"},
                {"method": "POST", "path": "/v2/subscriptions", "role": "consumer"},
                {"method": "GET", "path": "/v2/*", "role": "consumer"},
            ],
            "cache_ttl_seconds": config.pep_cache_ttl_seconds,
            "wire_log": str(wire / "broker-pep.wire"),
        },
    )
    vault_pep = topology.start_service(
        "vault-pep",
        "trustbus.pep",
        {
            "upstream_url": vault.url,
            "idm_url": idm.url,
            # No rule covers /v1/audit: reading it through the proxy is
            # denied, the harness queries the vault directly as operator.
            "required_role": [
                {"method": "POST", "path": "/v1/keys/*/public", "role": "producer"},
                {"method": "POST", "path": "/v1/keys/*/private", "role": "consumer"},
            ],
            "cache_ttl_seconds": config.pep_cache_ttl_seconds,
            "wire_log": str(wire / "vault-pep.wire"),
        },
    )
    urls.update(
        {
            "idm": idm.url,
            "vault": vault.url,
            "broker_for_agents": broker_pep.url,
            "vault_for_agents": vault_pep.url,
        }
    )
    return urls


def _producer_pool_config(
    config: ScenarioConfig, urls: dict[str, str], trust: _TrustMaterial | None, topology: Topology
) -> dict:
    defaults: dict = {
        "mode": config.mode,
        "broker_url": urls["broker_for_agents"],
        "count": config.cycles_per_producer,
        "interval_ms": config.interval_ms,
        "generator": config.generator,
    }
    if trust is not None:
        defaults.update(
            {
                "idm_url": urls["idm"],
                "vault_url": urls["vault_for_agents"],
                "expected_vault_measurement": _b64(trust.vault_identity.measurement),
                "avs_root_public": _b64(trust.avs_root_public),
            }
        )
    entries = []
    for index in range(config.producers):
        producer_id = config.producer_id(index)
        entry = {
            "producer_id": producer_id,
            "region": config.region_name(config.region_index(index)),
            "seed": config.producer_seed(index),
        }
        if trust is not None:
            entry["username"] = producer_id
            entry["password"] = trust.passwords[producer_id]
        entries.append(entry)
    return {
        "defaults": defaults,
        "producers": entries,
        "acquired_file": str(topology.state_dir / "producers.acquired"),
        "start_barrier_file": str(topology.state_dir / "start.barrier"),
        "barrier_timeout_s": 120.0,
        "out_file": str(topology.artifacts_dir / "producers.json"),
        "log_level": config.log_level,
    }


def _consumer_config(
    config: ScenarioConfig,
    region: int,
    urls: dict[str, str],
    trust: _TrustMaterial | None,
    topology: Topology,
) -> dict:
    consumer_id = config.consumer_id(region)
    consumer: dict = {
        "consumer_id": consumer_id,
        "mode": config.mode,
        "region": config.region_name(region),
        "pattern": config.region_pattern(region),
        "window_ms": config.window_ms,
        "broker_url": urls["broker_for_agents"],
        "wire_log": str(topology.wire_dir / f"consumer-r{region:02d}.wire"),
    }
    if trust is not None:
        consumer.update(
            {
                "identity": trust.consumer_identities[region].to_obj(),
                "idm_url": urls["idm"],
                "vault_url": urls["vault_for_agents"],
                "username": consumer_id,
                "password": trust.passwords[consumer_id],
            }
        )
    return consumer


def _await_drained(broker_url: str, timeout: float) -> dict:
    """Wait until the broker has no undelivered notifications, then return
    its stats. Publication is over, so enqueued can only stay put."""
    deadline = time.monotonic() + timeout
    stats: dict = {}
    while time.monotonic() < deadline:
        stats = _get_json(broker_url, "/v2/stats")
        totals = stats.get("notifications", {})
        if totals.get("delivered", 0) + totals.get("dropped", 0) >= totals.get("enqueued", 0):
            return stats
        time.sleep(_DRAIN_POLL_S)
    raise SetupFailed(f"broker did not drain within {timeout:.0f}s: {stats}")


def run_scenario(config: ScenarioConfig) -> RunReport:
    """Run one full topology to completion and assemble its report.

    Failures before publication starts tear everything down and remove the
    partially-written run directory; later failures keep it for inspection.
    """
    run_id = config.run_id or f"{config.mode}-{uuid.uuid4().hex[:8]}"
    # Services run with cwd at the run directory, so every path handed to
    # them must survive the cwd change.
    run_dir = (Path(config.workdir) / run_id).resolve()
    if run_dir.exists():
        raise SetupFailed(f"run directory already exists: {run_dir}")
    topology = Topology(config, run_dir)
    log.info("run %s: %s, %d producers x %d cycles", run_id, config.mode,
             config.producers, config.cycles_per_producer)
    started = time.monotonic()
    publication_started = False
    total_cycles = config.producers * config.cycles_per_producer
    try:
        trust = _TrustMaterial(config) if config.mode == "secure" else None
        urls = _start_services(topology, trust)

        pool_config = _producer_pool_config(config, urls, trust, topology)
        pool = topology.spawn("producers", "trustbus.agents.producer", pool_config)
        acquired = topology.await_file(
            pool,
            Path(pool_config["acquired_file"]),
            30.0 + 0.1 * config.producers,
            "producer pool never finished acquiring keys",
        )
        if acquired["acquired"] < acquired["total"]:
            log.warning(
                "only %d/%d producers acquired key material",
                acquired["acquired"],
                acquired["total"],
            )

        consumers = [
            topology.start_service(
                f"consumer-r{region:02d}",
                "trustbus.agents.consumer",
                _consumer_config(config, region, urls, trust, topology),
                timeout=10.0 + 0.5 * config.regions,
            )
            for region in range(config.regions)
        ]

        barrier = Path(pool_config["start_barrier_file"])
        barrier_tmp = barrier.with_suffix(".tmp")
        barrier_tmp.write_text(json.dumps({"released_at_ms": int(time.time() * 1000)}))
        os.replace(barrier_tmp, barrier)
        publication_started = True

        publish_timeout = (
            60.0
            + 0.05 * total_cycles
            + config.cycles_per_producer * config.interval_ms / 1000.0
        )
        topology.await_exit(pool, publish_timeout, "publication did not finish")
        broker_stats = _await_drained(urls["broker"], 30.0 + 0.01 * total_cycles)

        with open(pool_config["out_file"], "r", encoding="utf-8") as fh:
            producer_summaries = json.load(fh)["producers"]
        consumer_reports = [_get_json(c.url, "/report", timeout=30.0) for c in consumers]
        vault_audit = _get_json(urls["vault"], "/v1/audit") if trust is not None else None
    except Exception:
        topology.shutdown()
        if not publication_started:
            shutil.rmtree(run_dir, ignore_errors=True)
        raise
    topology.shutdown()

    report = build_report(
        run_id=run_id,
        mode=config.mode,
        seed=config.seed,
        producers=config.producers,
        regions=config.regions,
        cycles_per_producer=config.cycles_per_producer,
        interval_ms=config.interval_ms,
        producer_summaries=producer_summaries,
        consumer_reports=consumer_reports,
        broker_stats=broker_stats,
        vault_audit=vault_audit,
        duration_s=time.monotonic() - started,
        artifacts_dir=str(topology.artifacts_dir),
    )
    report.write(
        str(topology.artifacts_dir / "report.json"),
        str(topology.artifacts_dir / "cycles.csv"),
    )
    return report


def stress_sweep(counts: list[int], base_config: ScenarioConfig) -> dict:
    """One scenario per producer count, shared seed; failures mark the level
    and the sweep continues. Returns the summary table and artifact paths."""
    if not counts:
        raise ValueError("at least one producer count is required")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("producer counts must be strictly ascending")

    sweep_id = f"sweep-{uuid.uuid4().hex[:8]}"
    sweep_dir = (Path(base_config.workdir) / sweep_id).resolve()
    sweep_dir.mkdir(parents=True, exist_ok=True)
    levels: list[dict] = []
    for count in counts:
        level_config = replace(
            base_config,
            producers=count,
            regions=min(base_config.regions, count),
            run_id=f"n{count:04d}",
            workdir=str(sweep_dir),
        )
        try:
            report = run_scenario(level_config)
        except (TrustbusError, OSError) as exc:
            log.error("sweep level %d failed: %s", count, exc)
            levels.append({"producers": count, "status": f"failed: {exc}"})
            continue
        levels.append(
            {
                "producers": count,
                "status": "ok",
                "median_latency_ms": report.latency.get("median_ms"),
                "p95_latency_ms": report.latency.get("p95_ms"),
                "published": report.published,
                "delivered": report.broker["delivered"],
                "delivered_ratio": report.delivered_ratio,
                "report": str(Path(report.artifacts_dir) / "report.json"),
            }
        )

    completed = [level for level in levels if level["status"] == "ok"]
    plot_path = None
    if completed:
        from .plot import plot_latency_vs_producers

        plot_path = str(sweep_dir / "latency_vs_producers.svg")
        plot_latency_vs_producers(completed, plot_path)

    table_path = sweep_dir / "table.json"
    with open(table_path, "w", encoding="utf-8") as fh:
        json.dump(levels, fh, indent=2)
        fh.write("\n")
    return {
        "sweep_id": sweep_id,
        "dir": str(sweep_dir),
        "levels": levels,
        "plot": plot_path,
        "table": str(table_path),
    }
