"""Fleet coordinator tests: idempotent ingest, metrics, ticket lifecycle."""

import json
import random
import uuid

import pytest
from fastapi.testclient import TestClient

from vigil.fleet import (
    FleetError,
    FleetService,
    InvalidTransitionError,
    MalformedBatchError,
    UnknownTicketError,
    create_fleet_app,
)


def _ev(session_id, seq, kind, payload=None):
    return {
        "event_id": uuid.uuid4().hex,
        "session_id": session_id,
        "seq": seq,
        "timestamp": 1000.0 + seq,
        "kind": kind,
        "payload": payload or {},
    }


def _session_events(session_id, phase="resolved", cycles=2, tools=1, tool_ok=True):
    events = [_ev(session_id, 1, "session_started", {"issue_text": "x"})]
    seq = 2
    for _ in range(cycles):
        events.append(_ev(session_id, seq, "cycle", {"number": seq}))
        seq += 1
    for _ in range(tools):
        events.append(_ev(session_id, seq, "tool_invoked", {"success": tool_ok}))
        seq += 1
    if phase == "escalated":
        events.append(
            _ev(
                session_id,
                seq,
                "escalated",
                {
                    "findings": "needs a human",
                    "attempted_steps": [],
                    "recommendations": ["call IT"],
                },
            )
        )
        seq += 1
    events.append(_ev(session_id, seq, "session_ended", {"phase": phase}))
    return events


@pytest.fixture
def service(tmp_path):
    return FleetService(tmp_path / "fleet", durable=False)


class TestIngest:
    def test_accepts_and_stores(self, service):
        events = _session_events("s1")
        accepted = service.ingest("ep1", events)
        assert accepted == [e["event_id"] for e in events]
        assert service.metrics().sessions_total == 1

    def test_resend_ack_identical_store_unchanged(self, service):
        events = _session_events("s1")
        first = service.ingest("ep1", events)
        before = service.metrics()
        second = service.ingest("ep1", events)
        assert second == first
        assert service.metrics() == before

    def test_batch_too_large_rejected(self, service):
        events = [_ev("s1", i + 1, "cycle") for i in range(65)]
        with pytest.raises(MalformedBatchError):
            service.ingest("ep1", events)

    def test_malformed_event_rejects_whole_batch(self, service):
        good = _ev("s1", 1, "session_started")
        bad = _ev("s1", 2, "not-a-kind")
        with pytest.raises(MalformedBatchError):
            service.ingest("ep1", [good, bad])
        # nothing from the batch landed
        assert service.metrics().sessions_total == 0
        assert service.ingest("ep1", [good]) == [good["event_id"]]

    def test_bad_endpoint_id_rejected(self, service):
        for endpoint_id in ("", "../escape", "a/b", None, 7):
            with pytest.raises(MalformedBatchError):
                service.ingest(endpoint_id, [])

    def test_new_event_for_ended_session_rejected(self, service):
        service.ingest("ep1", _session_events("s1"))
        with pytest.raises(MalformedBatchError):
            service.ingest("ep1", [_ev("s1", 99, "cycle")])

    def test_idempotence_under_shuffled_duplicates(self, tmp_path):
        # final state must equal the deduplicated union however batches repeat
        rng = random.Random(7)
        batches = [
            _session_events(f"s{i}", phase=("escalated" if i % 3 == 0 else "resolved"))
            for i in range(8)
        ]
        reference = FleetService(tmp_path / "ref", durable=False)
        for batch in batches:
            reference.ingest("ep1", batch)

        noisy = FleetService(tmp_path / "noisy", durable=False)
        schedule = batches + [rng.choice(batches) for _ in range(10)]
        rng.shuffle(schedule)
        for batch in schedule:
            noisy.ingest("ep1", batch)

        assert noisy.metrics() == reference.metrics()
        assert len(noisy.list_tickets()) == len(reference.list_tickets())

    def test_synthetic_session_count(self, service):
        for i in range(153):
            service.ingest("ep1", _session_events(f"s{i:03d}", cycles=0, tools=0))
        assert service.metrics().sessions_total == 153


class TestMetrics:
    def test_empty_store_zeros_with_absent_rates(self, service):
        m = service.metrics()
        assert m.sessions_total == 0
        assert m.endpoints_reporting == 0
        assert m.resolved == m.no_issue == m.escalated == 0
        assert m.tool_success_rate is None
        assert m.median_cycles is None

    def test_tool_success_rate_division(self, service):
        # 1512 successes out of 1586 calls
        session_id = "s-tools"
        events = [_ev(session_id, 1, "session_started")]
        for i in range(1586):
            events.append(
                _ev(session_id, i + 2, "tool_invoked", {"success": i >= 74})
            )
        for start in range(0, len(events), 64):
            service.ingest("ep1", events[start : start + 64])
        rate = service.metrics().tool_success_rate
        assert rate == pytest.approx(1512 / 1586)
        assert round(rate * 100, 2) == 95.33

    def test_phase_counts(self, service):
        layout = [("resolved", 50), ("no_issue", 5), ("escalated", 5)]
        n = 0
        for phase, count in layout:
            for _ in range(count):
                service.ingest("ep1", _session_events(f"s{n}", phase=phase))
                n += 1
        m = service.metrics()
        assert (m.resolved, m.no_issue, m.escalated) == (50, 5, 5)
        assert m.sessions_total == 60

    def test_median_cycles_and_endpoints(self, service):
        for i, cycles in enumerate([1, 3, 9]):
            service.ingest(f"ep{i}", _session_events(f"s{i}", cycles=cycles))
        m = service.metrics()
        assert m.median_cycles == 3
        assert m.endpoints_reporting == 3


class TestTickets:
    def test_escalated_event_opens_ticket(self, service):
        service.ingest("ep1", _session_events("s1", phase="escalated"))
        tickets = service.list_tickets(status="open")
        assert len(tickets) == 1
        ticket = tickets[0]
        assert ticket.ticket_id == "tkt-s1"
        assert ticket.session_id == "s1"
        assert ticket.endpoint_id == "ep1"
        assert ticket.package["recommendations"] == ["call IT"]

    def test_one_ticket_per_session_despite_retransmission(self, service):
        events = _session_events("s1", phase="escalated")
        service.ingest("ep1", events)
        service.ingest("ep1", events)
        assert len(service.list_tickets()) == 1

    def test_lifecycle_transitions(self, service):
        service.ingest("ep1", _session_events("s1", phase="escalated"))
        assert service.acknowledge("tkt-s1").status == "acknowledged"
        assert service.close("tkt-s1").status == "closed"

    def test_close_without_ack_rejected(self, service):
        service.ingest("ep1", _session_events("s1", phase="escalated"))
        with pytest.raises(InvalidTransitionError):
            service.close("tkt-s1")

    def test_double_ack_rejected(self, service):
        service.ingest("ep1", _session_events("s1", phase="escalated"))
        service.acknowledge("tkt-s1")
        with pytest.raises(InvalidTransitionError):
            service.acknowledge("tkt-s1")

    def test_unknown_ticket(self, service):
        with pytest.raises(UnknownTicketError):
            service.acknowledge("tkt-nope")

    def test_list_open_on_empty_store(self, service):
        assert service.list_tickets(status="open") == []

    def test_bad_status_filter(self, service):
        with pytest.raises(FleetError):
            service.list_tickets(status="bogus")


class TestRestart:
    def test_index_rebuilt_from_disk(self, tmp_path):
        root = tmp_path / "fleet"
        first = FleetService(root, durable=False)
        first.ingest("ep1", _session_events("s1", phase="escalated"))
        first.ingest("ep2", _session_events("s2", cycles=5))
        first.acknowledge("tkt-s1")
        before = first.metrics()

        second = FleetService(root, durable=False)
        assert second.metrics() == before
        assert second.get_ticket("tkt-s1").status == "acknowledged"
        # re-ingesting after restart is still a no-op
        second.ingest("ep1", _session_events("s1", phase="escalated")[:0])
        assert second.metrics() == before


class TestHttpApi:
    @pytest.fixture
    def client(self, service):
        return TestClient(create_fleet_app(service))

    def test_ingest_roundtrip(self, client):
        events = _session_events("s1")
        response = client.post(
            "/v1/traces", json={"endpoint_id": "ep1", "events": events}
        )
        assert response.status_code == 200
        assert response.json()["accepted"] == [e["event_id"] for e in events]
        again = client.post(
            "/v1/traces", json={"endpoint_id": "ep1", "events": events}
        )
        assert again.json() == response.json()

    def test_malformed_batch_400(self, client):
        cases = [
            {"events": []},  # missing endpoint_id
            {"endpoint_id": "ep1"},  # missing events
            {"endpoint_id": "ep1", "events": "nope"},
            {"endpoint_id": "ep1", "events": [{"event_id": "x"}]},
        ]
        for body in cases:
            assert client.post("/v1/traces", json=body).status_code == 400
        raw = client.post(
            "/v1/traces",
            content=b"{not json",
            headers={"content-type": "application/json"},
        )
        assert raw.status_code == 400

    def test_metrics_endpoint(self, client):
        client.post(
            "/v1/traces",
            json={"endpoint_id": "ep1", "events": _session_events("s1")},
        )
        body = client.get("/v1/fleet/metrics").json()
        assert body["sessions_total"] == 1
        assert body["resolved"] == 1

    def test_escalation_queue_over_http(self, client):
        client.post(
            "/v1/traces",
            json={
                "endpoint_id": "ep1",
                "events": _session_events("s1", phase="escalated"),
            },
        )
        listing = client.get("/v1/escalations", params={"status": "open"}).json()
        assert [t["ticket_id"] for t in listing["tickets"]] == ["tkt-s1"]

        assert client.post("/v1/escalations/tkt-s1/close").status_code == 409
        ack = client.post("/v1/escalations/tkt-s1/ack")
        assert ack.status_code == 200
        assert ack.json()["status"] == "acknowledged"
        assert client.post("/v1/escalations/tkt-s1/close").status_code == 200
        assert client.post("/v1/escalations/tkt-missing/ack").status_code == 404
        assert (
            client.get("/v1/escalations", params={"status": "bogus"}).status_code
            == 400
        )

    def test_sync_loop_lands_in_fleet(self, client, tmp_path, fake_clock):
        # endpoint-side trace store drains into the fleet via the HTTP API
        from conftest import SCENARIO_DIR
        from vigil.scenario import load_scenario, replay
        from vigil.traces import SyncCursor, sync

        scenario = load_scenario(SCENARIO_DIR / "escalation.json")
        result = replay(
            scenario, tmp_path / "traces", session_id="s-http", clock=fake_clock,
            durable=False,
        )

        class ClientTransport:
            def send(self, endpoint_id, events):
                response = client.post(
                    "/v1/traces",
                    json={
                        "endpoint_id": endpoint_id,
                        "events": [json.loads(e.to_json()) for e in events],
                    },
                )
                assert response.status_code == 200
                return set(response.json()["accepted"])

        from vigil.traces import TraceStore

        store = TraceStore(tmp_path / "traces", durable=False)
        cursor = SyncCursor(tmp_path / "cursor.json")
        report = sync(store, ClientTransport(), cursor, "ep-edge")
        assert report.delivered_events == len(result.events)

        fleet_metrics = client.get("/v1/fleet/metrics").json()
        assert fleet_metrics["sessions_total"] == 1
        assert fleet_metrics["escalated"] == 1
        tickets = client.get("/v1/escalations").json()["tickets"]
        assert tickets[0]["session_id"] == "s-http"
