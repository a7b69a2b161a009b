"""Deterministic fakes shared by the test suite and the eval fixtures.

These live in the package (not tests/) because the acceptance scenarios
and docs reference them, and because downstream users simulating fleets
need the same fault-injecting transport the invariants were proved with.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .traces import TraceEvent, TransportUnavailable


class FakeClock:
    """Manually advanced clock; also usable as the sleep function."""

    def __init__(self, start: float = 0.0) -> None:
        self.now = start
        self.sleeps: list[float] = []

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.advance(seconds)


class InMemoryReceiver:
    """Idempotent receiving end of trace sync; dedups on event_id."""

    def __init__(self) -> None:
        self.events: dict[str, TraceEvent] = {}
        self.batches_seen = 0

    def accept(self, events: list[TraceEvent]) -> set[str]:
        self.batches_seen += 1
        accepted = set()
        for event in events:
            self.events.setdefault(event.event_id, event)
            accepted.add(event.event_id)
        return accepted

    def unique_count(self) -> int:
        return len(self.events)


@dataclass
class FlakyTransport:
    """Transport wrapper that drops acknowledgments or whole sends.

    ack_drop_rate: the receiver processed the batch but the ack is lost,
    so the sender must retransmit (the duplicate-delivery case).
    send_drop_rate: the batch never arrives (the outage case).
    """

    receiver: InMemoryReceiver
    ack_drop_rate: float = 0.0
    send_drop_rate: float = 0.0
    seed: int = 0
    down: bool = False
    sends: int = 0
    rng: random.Random = field(init=False)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)

    def send(self, endpoint_id: str, events: list[TraceEvent]) -> set[str]:
        self.sends += 1
        if self.down:
            raise TransportUnavailable("transport is down")
        if self.send_drop_rate and self.rng.random() < self.send_drop_rate:
            raise TransportUnavailable("batch lost in transit")
        accepted = self.receiver.accept(events)
        if self.ack_drop_rate and self.rng.random() < self.ack_drop_rate:
            raise TransportUnavailable("acknowledgment lost")
        return accepted
