"""Append-only session traces with durable local files and fleet sync.

One line-delimited record file per session, an index that is rebuilt from a
directory scan (the files are authoritative, the index is a cache), strict
per-session sequence numbers, and a sync loop whose cursor only advances on
acknowledgment. Exactly-once visibility at the receiver comes from random
event_ids, not from the cursor: resending an acknowledged batch is safe.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

EVENT_KINDS = (
    "session_started",
    "cycle",
    "tool_invoked",
    "policy_decision",
    "consent_requested",
    "consent_resolved",
    "plan_proposed",
    "step_executed",
    "step_verified",
    "rollback",
    "escalated",
    "session_ended",
)

DEFAULT_BATCH_SIZE = 64
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_CAP_SECONDS = 60.0


class TraceError(Exception):
    pass


class SequenceViolation(TraceError):
    """Appended seq is not previous + 1 for its session."""


class SessionClosedError(TraceError):
    """Append attempted after the session's session_ended event."""


class TransportUnavailable(Exception):
    """The fleet endpoint cannot be reached right now."""


@dataclass(frozen=True)
class TraceEvent:
    event_id: str
    session_id: str
    seq: int
    timestamp: float
    kind: str
    payload: dict[str, Any]

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise TraceError(f"unknown event kind: {self.kind!r}")
        if self.seq < 1:
            raise TraceError(f"seq must be >= 1, got {self.seq}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "event_id": self.event_id,
                "session_id": self.session_id,
                "seq": self.seq,
                "timestamp": self.timestamp,
                "kind": self.kind,
                "payload": self.payload,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        raw = json.loads(line)
        return cls(
            event_id=raw["event_id"],
            session_id=raw["session_id"],
            seq=int(raw["seq"]),
            timestamp=float(raw["timestamp"]),
            kind=raw["kind"],
            payload=raw["payload"],
        )


def new_event(
    session_id: str,
    seq: int,
    kind: str,
    payload: dict[str, Any],
    timestamp: float,
) -> TraceEvent:
    return TraceEvent(
        event_id=uuid.uuid4().hex,
        session_id=session_id,
        seq=seq,
        timestamp=timestamp,
        kind=kind,
        payload=payload,
    )


@dataclass
class _SessionMeta:
    last_seq: int = 0
    ended: bool = False


class TraceStore:
    """Per-session append-only JSONL files under one root directory.

    durable=True fsyncs every append before returning; tests that churn
    thousands of events turn it off. strict_seq=False accepts whatever
    order events arrive in (the fleet ingest path relies on that since
    network batches may interleave, with event_id dedup upstream).
    """

    def __init__(self, root, durable: bool = True, strict_seq: bool = True) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.durable = durable
        self.strict_seq = strict_seq
        self._meta: dict[str, _SessionMeta] = {}
        self._lock = threading.Lock()
        self._rescan()

    def _path(self, session_id: str) -> Path:
        safe = session_id.replace("/", "_")
        return self.root / f"{safe}.jsonl"

    def _rescan(self) -> None:
        """Rebuild session metadata from the files on disk."""
        self._meta.clear()
        for path in sorted(self.root.glob("*.jsonl")):
            meta = _SessionMeta()
            session_id = None
            for event in _read_events_file(path):
                session_id = event.session_id
                meta.last_seq = max(meta.last_seq, event.seq)
                if event.kind == "session_ended":
                    meta.ended = True
            if session_id is not None:
                self._meta[session_id] = meta

    def append(self, event: TraceEvent) -> None:
        with self._lock:
            meta = self._meta.setdefault(event.session_id, _SessionMeta())
            if meta.ended:
                raise SessionClosedError(
                    f"session {event.session_id!r} already ended; seq {event.seq} rejected"
                )
            if self.strict_seq and event.seq != meta.last_seq + 1:
                raise SequenceViolation(
                    f"session {event.session_id!r}: expected seq {meta.last_seq + 1}, "
                    f"got {event.seq}"
                )
            path = self._path(event.session_id)
            line = event.to_json() + "\n"
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                if self.durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            meta.last_seq = max(meta.last_seq, event.seq)
            if event.kind == "session_ended":
                meta.ended = True

    def read(self, session_id: str, from_seq: int = 1) -> list[TraceEvent]:
        path = self._path(session_id)
        if not path.exists():
            return []
        events = [e for e in _read_events_file(path) if e.seq >= from_seq]
        events.sort(key=lambda e: e.seq)
        return events

    def session_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._meta)

    def last_seq(self, session_id: str) -> int:
        with self._lock:
            meta = self._meta.get(session_id)
            return meta.last_seq if meta else 0

    def is_ended(self, session_id: str) -> bool:
        with self._lock:
            meta = self._meta.get(session_id)
            return bool(meta and meta.ended)


def _read_events_file(path: Path) -> Iterable[TraceEvent]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield TraceEvent.from_json(line)


class TraceWriter:
    """Sequencing helper bound to one session stream."""

    def __init__(
        self,
        store: TraceStore,
        session_id: str,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.store = store
        self.session_id = session_id
        self.clock = clock
        self._seq = store.last_seq(session_id)
        # consent resolutions arrive from API threads while the session
        # thread is emitting; seq assignment and append must be atomic
        self._lock = threading.Lock()

    def emit(self, kind: str, payload: dict[str, Any] | None = None) -> TraceEvent:
        with self._lock:
            self._seq += 1
            event = new_event(
                session_id=self.session_id,
                seq=self._seq,
                kind=kind,
                payload=dict(payload or {}),
                timestamp=self.clock(),
            )
            self.store.append(event)
        return event


class SyncCursor:
    """Per-session high-water mark of acknowledged seqs, saved atomically."""

    def __init__(self, path) -> None:
        self.path = Path(path)
        self.positions: dict[str, int] = {}
        if self.path.exists():
            self.positions = {
                k: int(v) for k, v in json.loads(self.path.read_text("utf-8")).items()
            }

    def position(self, session_id: str) -> int:
        return self.positions.get(session_id, 0)

    def advance(self, session_id: str, seq: int) -> None:
        if seq < self.position(session_id):
            raise TraceError("cursor may not move backwards")
        self.positions[session_id] = seq

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.positions, sort_keys=True), "utf-8")
        os.replace(tmp, self.path)


class Transport(Protocol):
    def send(self, endpoint_id: str, events: list[TraceEvent]) -> set[str]:
        """Deliver a batch; returns the event_ids the receiver accepted.

        Raises TransportUnavailable when the receiver cannot be reached.
        """
        ...


@dataclass
class SyncReport:
    sent_batches: int = 0
    delivered_events: int = 0
    retries: int = 0
    gave_up: bool = False


def sync(
    store: TraceStore,
    transport: Transport,
    cursor: SyncCursor,
    endpoint_id: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_attempts: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> SyncReport:
    """Push everything past the cursor, batch by batch, with backoff.

    The cursor advances only after the transport acknowledges every event
    in a batch; an unacknowledged batch is retried wholesale, which is
    safe because the receiver dedups on event_id. Transport outages leave
    the cursor untouched so nothing is ever skipped.
    """
    report = SyncReport()
    for session_id in store.session_ids():
        backlog = store.read(session_id, from_seq=cursor.position(session_id) + 1)
        for start in range(0, len(backlog), batch_size):
            batch = backlog[start : start + batch_size]
            delivered = False
            for attempt in range(max_attempts):
                try:
                    accepted = transport.send(endpoint_id, batch)
                except TransportUnavailable:
                    accepted = None
                if accepted is not None and all(e.event_id in accepted for e in batch):
                    cursor.advance(session_id, batch[-1].seq)
                    cursor.save()
                    report.sent_batches += 1
                    report.delivered_events += len(batch)
                    delivered = True
                    break
                report.retries += 1
                if attempt < max_attempts - 1:
                    sleep(min(BACKOFF_BASE_SECONDS * (2**attempt), BACKOFF_CAP_SECONDS))
            if not delivered:
                report.gave_up = True
                return report
    return report


class HttpTransport:
    """Real transport: POST batches to the fleet service."""

    def __init__(self, fleet_url: str, timeout: float = 10.0) -> None:
        self.fleet_url = fleet_url.rstrip("/")
        self.timeout = timeout

    def send(self, endpoint_id: str, events: list[TraceEvent]) -> set[str]:
        import httpx

        body = {
            "endpoint_id": endpoint_id,
            "events": [json.loads(e.to_json()) for e in events],
        }
        try:
            response = httpx.post(
                f"{self.fleet_url}/v1/traces", json=body, timeout=self.timeout
            )
        except httpx.HTTPError as exc:
            raise TransportUnavailable(str(exc)) from exc
        if response.status_code >= 500:
            raise TransportUnavailable(f"fleet returned {response.status_code}")
        if response.status_code != 200:
            raise TraceError(
                f"fleet rejected batch: {response.status_code} {response.text}"
            )
        return set(response.json().get("accepted", ()))
