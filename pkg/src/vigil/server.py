"""Local endpoint service: the session API the console talks to.

One runtime owns the trace store, the policy rules, one shared read-only
knowledge store, and a handle per live session. Each session runs on its
own thread inside run_to_completion; consent answers arrive over HTTP and
are routed to the owning runner's mailbox, which wakes the blocked thread.
An optional background thread pushes traces to the fleet service; sessions
never wait on it, so an unreachable fleet URL costs nothing locally.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import HTMLResponse, JSONResponse, RedirectResponse

from .hosts import SimulatedHost
from .knowledge import KnowledgeStore
from .policy import RuleSet, load_default_rules
from .scenario import Scenario, build_knowledge
from .sessions import (
    AlreadyResolvedError,
    HeuristicProvider,
    ScriptedProvider,
    SessionConfig,
    SessionRunner,
    UnknownConsentError,
    finalize,
)
from .tools import InvocationLedger, default_registry
from .traces import HttpTransport, SyncCursor, TraceStore, TraceWriter, sync

logger = logging.getLogger("vigil.server")


class UnknownSessionError(Exception):
    pass


class SessionRunningError(Exception):
    """Summary asked for before the session reached a terminal phase."""


class _SessionHandle:
    def __init__(self, session_id: str, runner: SessionRunner) -> None:
        self.session_id = session_id
        self.runner = runner
        self.thread: threading.Thread | None = None
        self.done = threading.Event()
        self.summary: str | None = None
        self.error: str | None = None


class EndpointRuntime:
    """Owns live sessions, their traces, and the fleet sync loop."""

    def __init__(
        self,
        data_dir,
        rules: RuleSet | None = None,
        scenario: Scenario | None = None,
        endpoint_id: str = "endpoint",
        fleet_url: str | None = None,
        sync_interval: float = 5.0,
        durable: bool = True,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.rules = rules if rules is not None else load_default_rules()
        self.scenario = scenario
        self.endpoint_id = endpoint_id
        self.fleet_url = fleet_url
        self.sync_interval = sync_interval
        self.store = TraceStore(self.data_dir / "traces", durable=durable)
        self.knowledge = (
            build_knowledge(scenario) if scenario is not None else KnowledgeStore()
        )
        self._handles: dict[str, _SessionHandle] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._sync_thread: threading.Thread | None = None
        if fleet_url:
            self._sync_thread = threading.Thread(
                target=self._sync_loop, name="fleet-sync", daemon=True
            )
            self._sync_thread.start()

    # -- session lifecycle -------------------------------------------------

    def start_session(self, issue_text: str) -> str:
        if self._stop.is_set():
            raise RuntimeError("service is shutting down")
        session_id = f"s-{uuid.uuid4().hex[:12]}"
        if self.scenario is not None:
            host = self.scenario.host.clone()
            provider: Any = ScriptedProvider(self.scenario.decisions)
            config = self.scenario.config
        else:
            # no scenario loaded: demo mode against a healthy default host
            host = SimulatedHost()
            provider = HeuristicProvider()
            config = SessionConfig()
        runner = SessionRunner(
            rules=self.rules,
            registry=default_registry(),
            host=host,
            knowledge=self.knowledge,
            writer=TraceWriter(self.store, session_id),
            ledger=InvocationLedger(),
            config=config,
        )
        handle = _SessionHandle(session_id, runner)
        runner.start_session(issue_text)
        thread = threading.Thread(
            target=self._drive,
            args=(handle, provider),
            name=f"session-{session_id}",
            daemon=True,
        )
        handle.thread = thread
        with self._lock:
            self._handles[session_id] = handle
        thread.start()
        return session_id

    def _drive(self, handle: _SessionHandle, provider: Any) -> None:
        try:
            session = handle.runner.run_to_completion(provider)
            handle.summary = finalize(session, self.store.read(handle.session_id))
        except Exception as exc:  # a broken script must not take the server down
            logger.exception("session %s crashed", handle.session_id)
            handle.error = str(exc)
        finally:
            handle.done.set()

    def _get_handle(self, session_id: str) -> _SessionHandle:
        with self._lock:
            handle = self._handles.get(session_id)
        if handle is None:
            raise UnknownSessionError(f"unknown session: {session_id}")
        return handle

    # -- API surface ---------------------------------------------------------

    def events(self, session_id: str, after: int = 0) -> dict[str, Any]:
        handle = self._get_handle(session_id)
        events = self.store.read(session_id, from_seq=after + 1)
        session = handle.runner.session
        return {
            "session_id": session_id,
            "events": [json.loads(event.to_json()) for event in events],
            "last_seq": events[-1].seq if events else after,
            "phase": session.phase if session is not None else "intake",
            "ended": handle.done.is_set(),
        }

    def resolve_consent(self, request_id: str, approved: bool) -> dict[str, Any]:
        handle = self._find_consent_owner(request_id)
        request = handle.runner.resolve_consent(request_id, approved)
        return {"request_id": request.request_id, "status": request.status}

    def _find_consent_owner(self, request_id: str) -> _SessionHandle:
        with self._lock:
            handles = list(self._handles.values())
        for handle in handles:
            try:
                handle.runner.mailbox.get(request_id)
            except UnknownConsentError:
                continue
            return handle
        raise UnknownConsentError(f"unknown consent request: {request_id}")

    def summary(self, session_id: str) -> dict[str, Any]:
        handle = self._get_handle(session_id)
        if not handle.done.is_set():
            raise SessionRunningError(f"session {session_id} is still running")
        if handle.error is not None:
            raise RuntimeError(handle.error)
        session = handle.runner.session
        return {
            "session_id": session_id,
            "phase": session.phase if session is not None else "unknown",
            "summary": handle.summary,
        }

    def list_sessions(self) -> list[dict[str, Any]]:
        with self._lock:
            handles = list(self._handles.values())
        views = []
        for handle in handles:
            session = handle.runner.session
            if session is not None:
                views.append(session.public_view())
        return views

    # -- lifecycle -----------------------------------------------------------

    def shutdown(self, timeout: float = 10.0) -> None:
        """Expire pending consents as denials and join session threads.

        Expiry wakes every thread blocked in a consent wait; the session
        thread itself records the consent_resolved "expired" event before
        abandoning the plan. A session may then adopt a further plan and
        ask again, so expiry repeats until the thread winds down to a
        terminal phase.
        """
        self._stop.set()
        with self._lock:
            handles = list(self._handles.values())
        for handle in handles:
            if handle.thread is None:
                continue
            deadline = time.monotonic() + timeout
            while handle.thread.is_alive() and time.monotonic() < deadline:
                handle.runner.mailbox.expire_all_pending()
                handle.thread.join(0.05)
        if self._sync_thread is not None:
            self._sync_thread.join(timeout)

    def _sync_loop(self) -> None:
        transport = HttpTransport(self.fleet_url)
        cursor = SyncCursor(self.data_dir / "sync_cursor.json")
        while not self._stop.wait(self.sync_interval):
            try:
                sync(
                    self.store,
                    transport,
                    cursor,
                    self.endpoint_id,
                    max_attempts=2,
                    sleep=lambda seconds: self._stop.wait(min(seconds, 1.0)),
                )
            except Exception:
                # offline invariant: fleet trouble never disturbs sessions
                logger.warning("fleet sync failed", exc_info=True)


_PLACEHOLDER_PAGE = """<!doctype html>
<title>vigil endpoint</title>
<style>body{font-family:system-ui,sans-serif;margin:4rem auto;max-width:40rem}</style>
<h1>vigil endpoint</h1>
<p>The service is running, but no console build was found. Use the HTTP API
directly, or build the console and restart with <code>--console-dir</code>:</p>
<pre>POST /v1/sessions              {"issue_text": "..."}
GET  /v1/sessions/{id}/events  ?after=&lt;seq&gt;
POST /v1/consents/{rid}        {"approved": true}
GET  /v1/sessions/{id}/summary</pre>
"""


async def _json_body(request: Request) -> dict[str, Any] | None:
    try:
        body = await request.json()
    except Exception:
        return None
    return body if isinstance(body, dict) else None


def create_endpoint_app(
    runtime: EndpointRuntime, console_dir=None
) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        runtime.shutdown()

    app = FastAPI(title="vigil endpoint", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = await _json_body(request)
        if body is None:
            return JSONResponse({"detail": "body must be a JSON object"}, status_code=400)
        issue = body.get("issue_text")
        if issue is None and runtime.scenario is not None:
            # scripted sessions ignore the intake text, so a bare POST may
            # fall back to the scenario's own issue description
            issue = runtime.scenario.issue_text
        if not isinstance(issue, str) or not issue.strip():
            return JSONResponse(
                {"detail": "issue_text must be a non-empty string"}, status_code=400
            )
        try:
            session_id = runtime.start_session(issue.strip())
        except RuntimeError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=503)
        return {"session_id": session_id}

    @app.get("/v1/sessions")
    def sessions_index():
        return {"sessions": runtime.list_sessions()}

    @app.get("/v1/sessions/{session_id}/events")
    def session_events(session_id: str, after: int = 0):
        try:
            return runtime.events(session_id, after=after)
        except UnknownSessionError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=404)

    @app.post("/v1/consents/{request_id}")
    async def consent(request_id: str, request: Request):
        body = await _json_body(request)
        if body is None or not isinstance(body.get("approved"), bool):
            return JSONResponse(
                {"detail": "body must be {\"approved\": true|false}"}, status_code=400
            )
        try:
            return runtime.resolve_consent(request_id, body["approved"])
        except UnknownConsentError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=404)
        except AlreadyResolvedError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)

    @app.get("/v1/sessions/{session_id}/summary")
    def session_summary(session_id: str):
        try:
            return runtime.summary(session_id)
        except UnknownSessionError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=404)
        except SessionRunningError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        except RuntimeError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=500)

    if console_dir is not None and Path(console_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount(
            "/console",
            StaticFiles(directory=str(console_dir), html=True),
            name="console",
        )

        @app.get("/", include_in_schema=False)
        def index():
            return RedirectResponse("/console/")

    else:

        @app.get("/", response_class=HTMLResponse, include_in_schema=False)
        def index():
            return _PLACEHOLDER_PAGE

    return app
