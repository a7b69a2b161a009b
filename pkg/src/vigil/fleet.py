"""Fleet-side coordinator: trace ingestion, metrics, and escalations.

This is the receiving half of the endpoint sync loop. Ingestion is
idempotent by event_id, so retransmitted batches are harmless; escalated
sessions open tickets that operators move through an
open -> acknowledged -> closed lifecycle. Storage reuses the endpoint
trace format (one JSONL file per session, grouped by endpoint directory)
so fleet data stays inspectable with the same tooling.

There is no authentication: endpoint_id is self-asserted, which is fine
for a trusted LAN or a demo and not for anything else.
"""

from __future__ import annotations

import json
import re
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .traces import TraceError, TraceEvent, TraceStore

DEFAULT_MAX_BATCH = 64

TICKET_STATUSES = ("open", "acknowledged", "closed")
# each status may advance only to its successor
_TICKET_FLOW = {"open": "acknowledged", "acknowledged": "closed"}

# endpoint ids become directory names, so keep them path-safe
_ENDPOINT_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$")


class FleetError(Exception):
    pass


class MalformedBatchError(FleetError):
    """The whole batch is rejected; nothing from it is stored."""


class UnknownTicketError(FleetError):
    pass


class InvalidTransitionError(FleetError):
    pass


@dataclass
class EscalationTicket:
    ticket_id: str
    session_id: str
    endpoint_id: str
    package: dict[str, Any]
    status: str = "open"

    def to_dict(self) -> dict[str, Any]:
        return {
            "ticket_id": self.ticket_id,
            "session_id": self.session_id,
            "endpoint_id": self.endpoint_id,
            "package": self.package,
            "status": self.status,
        }


@dataclass(frozen=True)
class FleetMetrics:
    endpoints_reporting: int
    sessions_total: int
    resolved: int
    no_issue: int
    escalated: int
    tool_success_rate: float | None
    median_cycles: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "endpoints_reporting": self.endpoints_reporting,
            "sessions_total": self.sessions_total,
            "resolved": self.resolved,
            "no_issue": self.no_issue,
            "escalated": self.escalated,
            "tool_success_rate": self.tool_success_rate,
            "median_cycles": self.median_cycles,
        }


@dataclass
class _SessionAgg:
    cycles: int = 0
    ended_phase: str | None = None


class FleetService:
    """Idempotent trace receiver with a derived metrics index.

    The index (per-session aggregates, tool counters, tickets) is a pure
    function of the stored event set; it is rebuilt from disk at startup
    and updated incrementally on ingest. Ticket state transitions are the
    only extra persistent state, appended to tickets.jsonl.
    """

    def __init__(
        self,
        root: str | Path,
        max_batch_size: int = DEFAULT_MAX_BATCH,
        durable: bool = True,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.root = Path(root)
        self.traces_dir = self.root / "traces"
        self.tickets_path = self.root / "tickets.jsonl"
        self.max_batch_size = max_batch_size
        self.durable = durable
        self.clock = clock
        self.traces_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._stores: dict[str, TraceStore] = {}
        self._event_ids: set[str] = set()
        self._sessions: dict[tuple[str, str], _SessionAgg] = {}
        self._tool_calls = 0
        self._tool_successes = 0
        self._tickets: dict[str, EscalationTicket] = {}
        self._rebuild()

    # -- startup -----------------------------------------------------------

    def _rebuild(self) -> None:
        for endpoint_dir in sorted(p for p in self.traces_dir.iterdir() if p.is_dir()):
            endpoint_id = endpoint_dir.name
            store = self._store_for(endpoint_id)
            for session_id in store.session_ids():
                for event in store.read(session_id):
                    self._event_ids.add(event.event_id)
                    self._index_event(endpoint_id, event)
        self._replay_ticket_log()

    def _store_for(self, endpoint_id: str) -> TraceStore:
        store = self._stores.get(endpoint_id)
        if store is None:
            # interleaved network batches arrive per session, not per seq
            store = TraceStore(
                self.traces_dir / endpoint_id, durable=self.durable, strict_seq=False
            )
            self._stores[endpoint_id] = store
        return store

    def _replay_ticket_log(self) -> None:
        if not self.tickets_path.exists():
            return
        with open(self.tickets_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    ticket = self._tickets[row["ticket_id"]]
                    status = row["status"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise FleetError(
                        f"{self.tickets_path}:{line_no}: unreplayable ticket entry"
                    ) from exc
                if _TICKET_FLOW.get(ticket.status) != status:
                    raise FleetError(
                        f"{self.tickets_path}:{line_no}: ticket {ticket.ticket_id} "
                        f"cannot move from {ticket.status} to {status}"
                    )
                ticket.status = status

    # -- ingestion ---------------------------------------------------------

    def ingest(self, endpoint_id: Any, events: Any) -> list[str]:
        """Store a batch of events, returning every accepted event_id.

        Duplicates (by event_id) are accepted and ignored, so the ack for
        a resent batch is identical to the first one. Any malformed event
        rejects the whole batch before anything is written.
        """
        if not isinstance(endpoint_id, str) or not _ENDPOINT_ID_RE.match(endpoint_id):
            raise MalformedBatchError(
                "endpoint_id must be a short name of letters, digits, ., _ or -"
            )
        if not isinstance(events, list):
            raise MalformedBatchError("events must be a list")
        if len(events) > self.max_batch_size:
            raise MalformedBatchError(
                f"batch of {len(events)} exceeds limit of {self.max_batch_size}"
            )
        parsed = [self._parse_event(raw) for raw in events]

        with self._lock:
            store = self._store_for(endpoint_id)
            # pre-check the closed-session rule so a bad batch leaves no
            # partial state behind
            closing: set[str] = set()
            for event in parsed:
                if event.event_id in self._event_ids:
                    continue
                if store.is_ended(event.session_id) or event.session_id in closing:
                    raise MalformedBatchError(
                        f"session {event.session_id!r} already ended"
                    )
                if event.kind == "session_ended":
                    closing.add(event.session_id)

            accepted: dict[str, None] = {}
            for event in parsed:
                accepted.setdefault(event.event_id)
                if event.event_id in self._event_ids:
                    continue
                store.append(event)
                self._event_ids.add(event.event_id)
                self._index_event(endpoint_id, event)
            return list(accepted)

    def _parse_event(self, raw: Any) -> TraceEvent:
        if not isinstance(raw, dict):
            raise MalformedBatchError("each event must be an object")
        try:
            event = TraceEvent(
                event_id=raw["event_id"],
                session_id=raw["session_id"],
                seq=raw["seq"],
                timestamp=raw["timestamp"],
                kind=raw["kind"],
                payload=raw["payload"],
            )
        except (KeyError, TypeError, TraceError) as exc:
            raise MalformedBatchError(f"bad event: {exc}") from exc
        if not isinstance(event.event_id, str) or not event.event_id:
            raise MalformedBatchError("event_id must be a non-empty string")
        if not isinstance(event.session_id, str) or not event.session_id:
            raise MalformedBatchError("session_id must be a non-empty string")
        if not isinstance(event.seq, int) or isinstance(event.seq, bool):
            raise MalformedBatchError("seq must be an integer")
        if not isinstance(event.timestamp, (int, float)) or isinstance(
            event.timestamp, bool
        ):
            raise MalformedBatchError("timestamp must be a number")
        if not isinstance(event.payload, dict):
            raise MalformedBatchError("payload must be an object")
        return event

    def _index_event(self, endpoint_id: str, event: TraceEvent) -> None:
        agg = self._sessions.setdefault(
            (endpoint_id, event.session_id), _SessionAgg()
        )
        if event.kind == "cycle":
            agg.cycles += 1
        elif event.kind == "tool_invoked":
            self._tool_calls += 1
            if event.payload.get("success"):
                self._tool_successes += 1
        elif event.kind == "session_ended":
            agg.ended_phase = event.payload.get("phase")
        elif event.kind == "escalated":
            self._open_ticket(endpoint_id, event)

    def _open_ticket(self, endpoint_id: str, event: TraceEvent) -> None:
        ticket_id = f"tkt-{event.session_id}"
        if ticket_id in self._tickets:
            return  # one ticket per escalated session, retransmissions included
        package = dict(event.payload)
        package["session_id"] = event.session_id
        self._tickets[ticket_id] = EscalationTicket(
            ticket_id=ticket_id,
            session_id=event.session_id,
            endpoint_id=endpoint_id,
            package=package,
        )

    # -- metrics -----------------------------------------------------------

    def metrics(self) -> FleetMetrics:
        with self._lock:
            endpoints = {ep for ep, _sid in self._sessions}
            cycles = [agg.cycles for agg in self._sessions.values()]
            phases = [agg.ended_phase for agg in self._sessions.values()]
            rate = None
            if self._tool_calls:
                rate = self._tool_successes / self._tool_calls
            return FleetMetrics(
                endpoints_reporting=len(endpoints),
                sessions_total=len(self._sessions),
                resolved=phases.count("resolved"),
                no_issue=phases.count("no_issue"),
                escalated=phases.count("escalated"),
                tool_success_rate=rate,
                median_cycles=statistics.median(cycles) if cycles else None,
            )

    # -- escalation queue --------------------------------------------------

    def list_tickets(self, status: str | None = None) -> list[EscalationTicket]:
        if status is not None and status not in TICKET_STATUSES:
            raise FleetError(f"unknown ticket status {status!r}")
        with self._lock:
            tickets = sorted(self._tickets.values(), key=lambda t: t.ticket_id)
            if status is not None:
                tickets = [t for t in tickets if t.status == status]
            return tickets

    def get_ticket(self, ticket_id: str) -> EscalationTicket:
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise UnknownTicketError(f"unknown ticket {ticket_id!r}")
            return ticket

    def acknowledge(self, ticket_id: str) -> EscalationTicket:
        return self._transition(ticket_id, "acknowledged")

    def close(self, ticket_id: str) -> EscalationTicket:
        return self._transition(ticket_id, "closed")

    def _transition(self, ticket_id: str, new_status: str) -> EscalationTicket:
        with self._lock:
            ticket = self.get_ticket(ticket_id)
            if _TICKET_FLOW.get(ticket.status) != new_status:
                raise InvalidTransitionError(
                    f"ticket {ticket_id} cannot move from "
                    f"{ticket.status} to {new_status}"
                )
            ticket.status = new_status
            with open(self.tickets_path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "ticket_id": ticket_id,
                            "status": new_status,
                            "at": self.clock(),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            return ticket


def create_fleet_app(service: FleetService) -> FastAPI:
    """Wrap a FleetService in the HTTP API the endpoints and console use."""
    app = FastAPI(title="fleet coordinator", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def transition_response(fn, ticket_id: str):
        try:
            return fn(ticket_id).to_dict()
        except UnknownTicketError:
            return JSONResponse(
                {"detail": f"unknown ticket {ticket_id!r}"}, status_code=404
            )
        except InvalidTransitionError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)

    @app.post("/v1/traces")
    async def ingest(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"detail": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"detail": "body must be an object"}, status_code=400)
        try:
            accepted = service.ingest(body.get("endpoint_id"), body.get("events"))
        except MalformedBatchError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        return {"accepted": accepted}

    @app.get("/v1/fleet/metrics")
    async def metrics():
        return service.metrics().to_dict()

    @app.get("/v1/escalations")
    async def escalations(status: str | None = None):
        if status is not None and status not in TICKET_STATUSES:
            return JSONResponse(
                {"detail": f"unknown status {status!r}"}, status_code=400
            )
        return {"tickets": [t.to_dict() for t in service.list_tickets(status)]}

    @app.post("/v1/escalations/{ticket_id}/ack")
    async def ack_ticket(ticket_id: str):
        return transition_response(service.acknowledge, ticket_id)

    @app.post("/v1/escalations/{ticket_id}/close")
    async def close_ticket(ticket_id: str):
        return transition_response(service.close, ticket_id)

    return app
