"""Process supervision for benchmark topologies.

Every component runs as its own OS process started from its module CLI; the
harness is the only party that starts or stops anything. Services announce
readiness through ready files carrying their bound port, so a whole topology
can run on ephemeral ports without coordination.
"""

from __future__ import annotations

import http.client
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from ..errors import SetupFailed
from ..httpclient import HttpClient
from .config import ScenarioConfig

log = logging.getLogger(__name__)

READY_TIMEOUT_S = 10.0


@dataclass
class ManagedProcess:
    name: str
    proc: subprocess.Popen
    log_path: Path
    url: str = ""

    def alive(self) -> bool:
        return self.proc.poll() is None


def _tail(path: Path, lines: int = 12) -> str:
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return "<no log>"
    return "\n".join(text.splitlines()[-lines:])


class Topology:
    """Spawns, tracks, and tears down the processes of one run.

    Artifacts are grouped by sensitivity class: ``configs`` hold launch
    parameters (including secrets and generator settings), ``logs`` the
    processes' stderr, ``wire`` raw request captures, ``state`` persisted
    service data and coordination files, ``artifacts`` collected results.
    """

    def __init__(self, config: ScenarioConfig, run_dir: Path) -> None:
        self.config = config
        self.run_dir = run_dir
        self.configs_dir = run_dir / "configs"
        self.logs_dir = run_dir / "logs"
        self.state_dir = run_dir / "state"
        self.wire_dir = run_dir / "wire"
        self.artifacts_dir = run_dir / "artifacts"
        for path in (
            self.configs_dir,
            self.logs_dir,
            self.state_dir,
            self.wire_dir,
            self.artifacts_dir,
        ):
            path.mkdir(parents=True, exist_ok=True)
        self.processes: list[ManagedProcess] = []
        self.services: dict[str, ManagedProcess] = {}

    # -- spawning -------------------------------------------------------------

    def spawn(self, name: str, module: str, config_obj: dict) -> ManagedProcess:
        config_path = self.configs_dir / f"{name}.json"
        with open(config_path, "w", encoding="utf-8") as fh:
            json.dump(config_obj, fh, indent=2)
        log_path = self.logs_dir / f"{name}.log"
        with open(log_path, "ab") as log_fh:
            proc = subprocess.Popen(
                [sys.executable, "-m", module, str(config_path)],
                stdout=log_fh,
                stderr=log_fh,
                cwd=self.run_dir,
            )
        managed = ManagedProcess(name=name, proc=proc, log_path=log_path)
        self.processes.append(managed)
        log.info("spawned %s (pid %d)", name, proc.pid)
        return managed

    def start_service(
        self, name: str, module: str, config_obj: dict, timeout: float = READY_TIMEOUT_S
    ) -> ManagedProcess:
        """Spawn a service and block until its ready file appears."""
        ready_file = self.state_dir / f"{name}.ready"
        host, port = self.config.address(name)
        launch = {
            **config_obj,
            "name": name,
            "host": host,
            "port": port,
            "ready_file": str(ready_file),
            "log_level": self.config.log_level,
        }
        managed = self.spawn(name, module, launch)
        info = self.await_file(managed, ready_file, timeout, f"{name} not ready")
        managed.url = f"http://{host}:{info['port']}"
        self.services[name] = managed
        return managed

    def await_file(
        self, managed: ManagedProcess, path: Path, timeout: float, what: str
    ) -> dict:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if path.exists():
                with open(path, "r", encoding="utf-8") as fh:
                    return json.load(fh)
            if not managed.alive():
                raise SetupFailed(
                    f"{what}: {managed.name} exited with {managed.proc.returncode}\n"
                    f"{_tail(managed.log_path)}"
                )
            time.sleep(0.02)
        raise SetupFailed(f"{what} within {timeout:.0f}s\n{_tail(managed.log_path)}")

    def await_exit(self, managed: ManagedProcess, timeout: float, what: str) -> int:
        try:
            return managed.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            managed.proc.terminate()
            raise SetupFailed(f"{what}: {managed.name} still running after {timeout:.0f}s")

    # -- teardown -------------------------------------------------------------

    def shutdown(self) -> None:
        """Stop everything: polite /shutdown first, signals for stragglers."""
        for managed in reversed(self.processes):
            if managed.url and managed.alive():
                try:
                    client = HttpClient(managed.url, timeout=2.0)
                    try:
                        client.post_json("/shutdown", {})
                    finally:
                        client.close()
                except (OSError, http.client.HTTPException):
                    # The reply races the process exit; liveness is enforced
                    # by the wait/terminate ladder below anyway.
                    pass
        deadline = time.monotonic() + 5.0
        for managed in self.processes:
            remaining = deadline - time.monotonic()
            try:
                managed.proc.wait(timeout=max(remaining, 0.1))
            except subprocess.TimeoutExpired:
                managed.proc.terminate()
        for managed in self.processes:
            try:
                managed.proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                managed.proc.kill()
                managed.proc.wait()
