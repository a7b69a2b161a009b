"""Trace store durability, sequencing, serialization, and sync delivery."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from vigil.testing import FakeClock, FlakyTransport, InMemoryReceiver
from vigil.traces import (
    SequenceViolation,
    SessionClosedError,
    SyncCursor,
    TraceError,
    TraceEvent,
    TraceStore,
    TraceWriter,
    TransportUnavailable,
    new_event,
    sync,
)


def make_event(session_id: str, seq: int, kind: str = "cycle", **payload) -> TraceEvent:
    return new_event(session_id, seq, kind, payload, timestamp=float(seq))


def fill_session(store: TraceStore, session_id: str, n_events: int) -> list[TraceEvent]:
    events = [make_event(session_id, 1, "session_started", issue_text="x")]
    for seq in range(2, n_events):
        events.append(make_event(session_id, seq))
    events.append(make_event(session_id, n_events, "session_ended", phase="resolved"))
    for event in events:
        store.append(event)
    return events


class TestAppendAndRead:
    def test_ordered_read_back(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        fill_session(store, "s-1", 5)
        events = store.read("s-1")
        assert [e.seq for e in events] == [1, 2, 3, 4, 5]
        assert events[0].kind == "session_started"
        assert events[-1].kind == "session_ended"

    def test_gap_rejected(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        store.append(make_event("s", 1, "session_started"))
        store.append(make_event("s", 2))
        with pytest.raises(SequenceViolation):
            store.append(make_event("s", 5))

    def test_duplicate_seq_rejected(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        store.append(make_event("s", 1, "session_started"))
        with pytest.raises(SequenceViolation):
            store.append(make_event("s", 1))

    def test_must_start_at_one(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        with pytest.raises(SequenceViolation):
            store.append(make_event("s", 3))

    def test_append_after_end_rejected(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        fill_session(store, "s", 3)
        with pytest.raises(SessionClosedError):
            store.append(make_event("s", 4))

    def test_read_from_seq(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        fill_session(store, "s", 12)
        assert len(store.read("s", from_seq=1)) == 12
        assert [e.seq for e in store.read("s", from_seq=10)] == [10, 11, 12]
        assert store.read("s", from_seq=13) == []

    def test_unknown_session_reads_empty(self, tmp_path):
        assert TraceStore(tmp_path, durable=False).read("ghost") == []

    def test_sessions_are_isolated_files(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        fill_session(store, "a", 3)
        fill_session(store, "b", 4)
        assert (tmp_path / "a.jsonl").exists()
        assert (tmp_path / "b.jsonl").exists()
        assert store.session_ids() == ["a", "b"]

    def test_invalid_kind_rejected(self):
        with pytest.raises(TraceError):
            make_event("s", 1, "weird_kind")


class TestSerialization:
    payload_values = st.recursive(
        st.none() | st.booleans() | st.integers(-10**9, 10**9)
        | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=30),
        lambda children: st.lists(children, max_size=4)
        | st.dictionaries(st.text(max_size=8), children, max_size=4),
        max_leaves=10,
    )

    @given(
        kind=st.sampled_from(["cycle", "tool_invoked", "policy_decision"]),
        payload=st.dictionaries(st.text(min_size=1, max_size=10), payload_values, max_size=5),
    )
    @settings(max_examples=60)
    def test_round_trip_structural_equality(self, kind, payload):
        event = new_event("s", 1, kind, payload, timestamp=123.456)
        clone = TraceEvent.from_json(event.to_json())
        assert clone == event

    def test_file_round_trip(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        original = make_event(
            "s", 1, "session_started",
            issue_text="laptop won't wake", nested={"a": [1, 2, {"b": None}]},
        )
        store.append(original)
        assert store.read("s")[0] == original


class TestDurability:
    def test_restart_recovers_everything(self, tmp_path):
        store = TraceStore(tmp_path, durable=True)
        store.append(make_event("s", 1, "session_started"))
        store.append(make_event("s", 2))
        del store  # process "dies" mid-session

        reopened = TraceStore(tmp_path, durable=True)
        assert [e.seq for e in reopened.read("s")] == [1, 2]
        # and the stream can resume where it left off
        reopened.append(make_event("s", 3))
        assert reopened.last_seq("s") == 3

    def test_restart_remembers_ended_sessions(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        fill_session(store, "s", 3)
        reopened = TraceStore(tmp_path, durable=False)
        assert reopened.is_ended("s")
        with pytest.raises(SessionClosedError):
            reopened.append(make_event("s", 4))


class TestTraceWriter:
    def test_emit_sequences_automatically(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        clock = FakeClock(start=100.0)
        writer = TraceWriter(store, "s", clock=clock)
        writer.emit("session_started", {"issue_text": "x"})
        clock.advance(1.5)
        writer.emit("cycle", {"number": 1})
        events = store.read("s")
        assert [e.seq for e in events] == [1, 2]
        assert events[1].timestamp == 101.5

    def test_writer_resumes_after_restart(self, tmp_path):
        store = TraceStore(tmp_path, durable=False)
        TraceWriter(store, "s").emit("session_started")
        resumed = TraceWriter(TraceStore(tmp_path, durable=False), "s")
        event = resumed.emit("cycle")
        assert event.seq == 2


class TestSyncCursor:
    def test_save_load_round_trip(self, tmp_path):
        path = tmp_path / "cursor.json"
        cursor = SyncCursor(path)
        cursor.advance("s", 5)
        cursor.save()
        assert SyncCursor(path).position("s") == 5

    def test_never_moves_backwards(self, tmp_path):
        cursor = SyncCursor(tmp_path / "c.json")
        cursor.advance("s", 5)
        with pytest.raises(TraceError):
            cursor.advance("s", 3)


class TestSync:
    def _store_with_backlog(self, tmp_path, sessions: int, events_each: int) -> TraceStore:
        store = TraceStore(tmp_path / "traces", durable=False)
        for i in range(sessions):
            fill_session(store, f"s-{i:02d}", events_each)
        return store

    def test_clean_transport_delivers_all(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=3, events_each=10)
        receiver = InMemoryReceiver()
        transport = FlakyTransport(receiver)
        cursor = SyncCursor(tmp_path / "cursor.json")
        report = sync(store, transport, cursor, "ep-1", batch_size=4)
        assert receiver.unique_count() == 30
        assert report.delivered_events == 30
        assert not report.gave_up

    def test_dropped_acks_cause_no_duplicates(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=2, events_each=50)
        receiver = InMemoryReceiver()
        transport = FlakyTransport(receiver, ack_drop_rate=0.5, seed=11)
        cursor = SyncCursor(tmp_path / "cursor.json")
        clock = FakeClock()
        report = sync(
            store, transport, cursor, "ep-1", batch_size=8, sleep=clock.sleep
        )
        assert not report.gave_up
        assert receiver.unique_count() == 100
        local = {e.event_id for s in store.session_ids() for e in store.read(s)}
        assert set(receiver.events) == local
        assert report.retries > 0  # the fault actually fired

    def test_transport_down_cursor_unchanged(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=1, events_each=10)
        receiver = InMemoryReceiver()
        transport = FlakyTransport(receiver, down=True)
        cursor = SyncCursor(tmp_path / "cursor.json")
        clock = FakeClock()
        report = sync(store, transport, cursor, "ep-1", max_attempts=3, sleep=clock.sleep)
        assert report.gave_up
        assert cursor.position("s-00") == 0
        assert receiver.unique_count() == 0
        assert len(store.read("s-00")) == 10  # local data untouched

    def test_backoff_schedule_doubles_to_cap(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=1, events_each=5)
        transport = FlakyTransport(InMemoryReceiver(), down=True)
        clock = FakeClock()
        sync(store, transport, SyncCursor(tmp_path / "c.json"), "ep",
             max_attempts=8, sleep=clock.sleep)
        assert clock.sleeps == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0]

    def test_empty_backlog_is_noop(self, tmp_path):
        store = TraceStore(tmp_path / "traces", durable=False)
        transport = FlakyTransport(InMemoryReceiver())
        report = sync(store, transport, SyncCursor(tmp_path / "c.json"), "ep")
        assert report.sent_batches == 0
        assert transport.sends == 0

    def test_resumed_sync_skips_acknowledged(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=1, events_each=10)
        receiver = InMemoryReceiver()
        cursor = SyncCursor(tmp_path / "cursor.json")
        sync(store, FlakyTransport(receiver), cursor, "ep", batch_size=4)
        before = receiver.batches_seen
        report = sync(store, FlakyTransport(receiver), cursor, "ep", batch_size=4)
        assert report.sent_batches == 0
        assert receiver.batches_seen == before

    def test_interrupted_then_resumed_delivers_exactly_once(self, tmp_path):
        store = self._store_with_backlog(tmp_path, sessions=4, events_each=25)
        receiver = InMemoryReceiver()
        cursor = SyncCursor(tmp_path / "cursor.json")
        clock = FakeClock()
        # First pass: transport flaky enough that sync gives up partway.
        flaky = FlakyTransport(receiver, send_drop_rate=0.9, seed=5)
        sync(store, flaky, cursor, "ep", batch_size=4, max_attempts=2, sleep=clock.sleep)
        # Second pass with a clean link finishes the job.
        report = sync(store, FlakyTransport(receiver), cursor, "ep", batch_size=4)
        assert not report.gave_up
        assert receiver.unique_count() == 100
