"""Shared builders for engine-level tests."""

from __future__ import annotations

import socket
import threading
import time
from pathlib import Path

import pytest

from vigil.hosts import HostState, Mount, NetworkInfo, Process, SimulatedHost
from vigil.knowledge import KnowledgeStore
from vigil.policy import load_default_rules
from vigil.sessions import ConsentMailbox, SessionConfig, SessionRunner
from vigil.testing import FakeClock
from vigil.tools import InvocationLedger, default_registry
from vigil.traces import TraceStore, TraceWriter

REPO_ROOT = Path(__file__).resolve().parents[1]
SCENARIO_DIR = REPO_ROOT / "scenarios"


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock(start=1_000.0)


@pytest.fixture
def fleet_server(tmp_path_factory):
    """Real fleet service behind a real socket, for HttpTransport tests."""
    import uvicorn

    from vigil.fleet import FleetService, create_fleet_app

    service = FleetService(tmp_path_factory.mktemp("fleet"), durable=False)
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    server = uvicorn.Server(
        uvicorn.Config(
            create_fleet_app(service),
            host="127.0.0.1",
            port=port,
            log_level="warning",
        )
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("fleet server did not come up")
        time.sleep(0.01)
    yield f"http://127.0.0.1:{port}", service
    server.should_exit = True
    thread.join(timeout=5.0)


def build_runner(
    tmp_path,
    clock,
    session_id: str = "s-test",
    host: SimulatedHost | None = None,
    knowledge: KnowledgeStore | None = None,
    config: SessionConfig | None = None,
    rules=None,
):
    if host is None:
        host = SimulatedHost(
            state=HostState(
                uptime_seconds=86400.0,
                pending_security_updates=2,
                processes=[
                    Process(name="chrome", cpu_percent=45.0, memory_mb=900.0),
                    Process(name="svchost", cpu_percent=9.0, memory_mb=120.0),
                ],
                mounts=[Mount(path="C:", used_percent=62.0)],
                network=NetworkInfo(),
            )
        )
    store = TraceStore(tmp_path / "traces", durable=False)
    writer = TraceWriter(store, session_id, clock=clock)
    runner = SessionRunner(
        rules=rules or load_default_rules(),
        registry=default_registry(),
        host=host,
        knowledge=knowledge or KnowledgeStore(),
        writer=writer,
        mailbox=ConsentMailbox(),
        ledger=InvocationLedger(),
        config=config or SessionConfig(),
        clock=clock,
    )
    return runner, store
