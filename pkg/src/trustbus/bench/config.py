"""Scenario configuration for benchmark runs.

A scenario pins everything one topology run needs: mode, population sizes,
pacing, the data-generation seed, and where artifacts land. Producer and
consumer naming is derived here so configs, reports, and any offline
recomputation agree on who is who without passing name lists around.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

MODES = ("plain", "secure")

# Spreads per-producer seed streams apart; any odd constant works, it only
# has to be the same wherever values are recomputed.
_SEED_STRIDE = 1_000_003


def producer_seed(scenario_seed: int, producer_index: int) -> int:
    return scenario_seed * _SEED_STRIDE + producer_index


@dataclass(frozen=True)
class ScenarioConfig:
    """One benchmark run: who publishes, how much, and under which mode.

    ``addresses`` may pin ``{service: {"host": ..., "port": ...}}``; any
    service left out binds an ephemeral port and reports it via its ready
    file. ``pep_cache_ttl_seconds`` switches on the proxies' token-validation
    cache, which exists to isolate how much of the secure-mode overhead is
    repeated token introspection.
    """

    mode: str
    producers: int
    cycles_per_producer: int
    interval_ms: float = 0.0
    regions: int = 1
    seed: int = 0
    window_ms: int = 60_000
    workdir: str = "bench-runs"
    run_id: str = ""
    addresses: dict = field(default_factory=dict)
    generator: dict = field(
        default_factory=lambda: {"kind": "uniform", "low": "0.1", "high": "950.0"}
    )
    pep_cache_ttl_seconds: float = 0.0
    pbkdf2_iterations: int = 2_000
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.producers < 1:
            raise ValueError("producers must be at least 1")
        if self.cycles_per_producer < 1:
            raise ValueError("cycles_per_producer must be at least 1")
        if not 1 <= self.regions <= self.producers:
            raise ValueError("regions must be between 1 and the producer count")
        if self.interval_ms < 0:
            raise ValueError("interval_ms must not be negative")

    @classmethod
    def from_obj(cls, obj: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        config = cls(**obj)
        env_seed = os.environ.get("BENCH_SEED")
        if env_seed is not None:
            config = cls(**{**obj, "seed": int(env_seed)})
        return config

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    def to_obj(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- naming ---------------------------------------------------------------
    # Producers are dealt round-robin into regions; one consumer aggregates
    # each region, so every party's key scope follows from its index alone.

    def region_index(self, producer_index: int) -> int:
        return producer_index % self.regions

    def region_name(self, region_index: int) -> str:
        return f"region-{region_index}"

    def producer_id(self, producer_index: int) -> str:
        return f"meter-r{self.region_index(producer_index):02d}-{producer_index:04d}"

    def consumer_id(self, region_index: int) -> str:
        return f"aggregator-r{region_index:02d}"

    def region_pattern(self, region_index: int) -> str:
        return f"meter-r{region_index:02d}-*"

    def producer_seed(self, producer_index: int) -> int:
        return producer_seed(self.seed, producer_index)

    def address(self, name: str) -> tuple[str, int]:
        entry = self.addresses.get(name, {})
        return entry.get("host", "127.0.0.1"), int(entry.get("port", 0))
