"""Diagnostic tool registry, shell gate, and invocation ledger.

Tools are the read-only evidence gatherers; run_shell is the single choke
point through which state-changing commands reach the host, and it demands
a policy decision (and a consent token for warn-tier commands) right in
its signature so the gate cannot be bypassed by accident. Every call,
success or failure, lands in the ledger that success-rate accounting and
traces are built from.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, IO

from .hosts import SimulatedHost
from .policy import PolicyDecision, TIER_ALLOW, TIER_DENY, TIER_WARN


class ToolError(Exception):
    pass


class UnknownToolError(ToolError):
    pass


class DuplicateToolError(ToolError):
    pass


class ArgumentValidationError(ToolError):
    pass


class PreconditionError(ToolError):
    pass


class DeniedCommandError(ToolError):
    """run_shell was handed a deny decision; callers must gate earlier."""


class MissingConsentError(ToolError):
    """run_shell was handed a warn decision without an approved consent."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    type: str  # "int" | "float" | "str" | "bool"
    required: bool = False
    minimum: float | None = None


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    purpose: str
    preconditions: tuple[str, ...]
    safety: str  # "read_only" | "state_changing"
    args_schema: tuple[FieldSpec, ...] = ()


@dataclass(frozen=True)
class ToolResult:
    tool: str
    success: bool
    payload: dict[str, Any]
    duration_ms: float
    error: str | None = None

    def __post_init__(self) -> None:
        # success=false iff error present
        if self.success and self.error is not None:
            raise ValueError("successful result must not carry an error")
        if not self.success and self.error is None:
            raise ValueError("failed result must carry an error")


@dataclass(frozen=True)
class LedgerEntry:
    kind: str  # "tool" | "shell"
    name: str  # tool name or shell command
    success: bool
    at: float
    duration_ms: float
    tier: str | None = None
    rule_id: str | None = None
    consent_id: str | None = None
    error: str | None = None


@dataclass
class LedgerStats:
    total_calls: int
    successes: int
    success_rate: float | None

    @property
    def undefined(self) -> bool:
        return self.success_rate is None


class InvocationLedger:
    """Append-only record of tool and shell calls. Thread-safe."""

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def entries(self, kind: str | None = None) -> list[LedgerEntry]:
        with self._lock:
            snapshot = list(self._entries)
        if kind is None:
            return snapshot
        return [e for e in snapshot if e.kind == kind]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def ledger_stats(ledger: InvocationLedger, kind: str | None = None) -> LedgerStats:
    """Success-rate accounting over the ledger (optionally one call kind)."""
    entries = ledger.entries(kind)
    total = len(entries)
    successes = sum(1 for e in entries if e.success)
    rate = successes / total if total else None
    return LedgerStats(total_calls=total, successes=successes, success_rate=rate)


@dataclass
class _FaultPlan:
    error: str
    fail_calls: set[int] = field(default_factory=set)  # 1-based call numbers
    probability: float = 0.0
    rng: random.Random | None = None
    calls_seen: int = 0

    def should_fail(self) -> bool:
        self.calls_seen += 1
        if self.calls_seen in self.fail_calls:
            return True
        if self.probability > 0 and self.rng is not None:
            return self.rng.random() < self.probability
        return False


Handler = Callable[[SimulatedHost, dict[str, Any]], dict[str, Any]]


class ToolRegistry:
    def __init__(self) -> None:
        self._tools: dict[str, tuple[ToolDescriptor, Handler]] = {}
        self._faults: dict[str, _FaultPlan] = {}

    def register(self, descriptor: ToolDescriptor, handler: Handler) -> None:
        if descriptor.name in self._tools:
            raise DuplicateToolError(f"tool already registered: {descriptor.name!r}")
        self._tools[descriptor.name] = (descriptor, handler)

    def get(self, name: str) -> tuple[ToolDescriptor, Handler]:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownToolError(f"unknown tool: {name!r}") from None

    def set_fault(
        self,
        name: str,
        error: str = "simulated fault",
        fail_calls: list[int] | None = None,
        probability: float = 0.0,
        seed: int | None = None,
    ) -> None:
        """Arrange failures for a tool: specific call numbers, a rate, or both."""
        self.get(name)  # existence check
        self._faults[name] = _FaultPlan(
            error=error,
            fail_calls=set(fail_calls or ()),
            probability=probability,
            rng=random.Random(seed) if probability > 0 else None,
        )

    def clear_fault(self, name: str) -> None:
        self._faults.pop(name, None)

    def _fault_fires(self, name: str) -> str | None:
        plan = self._faults.get(name)
        if plan is not None and plan.should_fail():
            return plan.error
        return None


def list_tools(registry: ToolRegistry) -> list[ToolDescriptor]:
    return sorted((d for d, _ in registry._tools.values()), key=lambda d: d.name)


def _validate_args(schema: tuple[FieldSpec, ...], args: dict[str, Any]) -> dict[str, Any]:
    known = {f.name for f in schema}
    for key in args:
        if key not in known:
            raise ArgumentValidationError(f"unexpected argument: {key!r}")
    checked: dict[str, Any] = {}
    casts = {"int": int, "float": float, "str": str, "bool": bool}
    for spec in schema:
        if spec.name not in args:
            if spec.required:
                raise ArgumentValidationError(f"missing required argument: {spec.name!r}")
            continue
        value = args[spec.name]
        expected = casts[spec.type]
        if expected in (int, float) and isinstance(value, bool):
            raise ArgumentValidationError(f"argument {spec.name!r} must be {spec.type}")
        if not isinstance(value, expected):
            raise ArgumentValidationError(f"argument {spec.name!r} must be {spec.type}")
        if spec.minimum is not None and value < spec.minimum:
            raise ArgumentValidationError(
                f"argument {spec.name!r} must be >= {spec.minimum}"
            )
        checked[spec.name] = value
    return checked


def _check_preconditions(descriptor: ToolDescriptor, host: SimulatedHost) -> None:
    for condition in descriptor.preconditions:
        if condition == "host_reachable":
            continue  # the simulated host is always reachable
        if condition == "network_stack_present":
            continue
        raise PreconditionError(f"unknown precondition: {condition!r}")


def invoke(
    registry: ToolRegistry,
    host: SimulatedHost,
    name: str,
    args: dict[str, Any] | None = None,
    ledger: InvocationLedger | None = None,
    clock: Callable[[], float] | None = None,
) -> ToolResult:
    """Invoke a diagnostic tool against the host.

    Unknown tools and bad arguments raise (caller bugs); injected faults
    come back as failed ToolResults because they model runtime breakage.
    Either way a ledger entry is written when a ledger is supplied.
    """
    descriptor, handler = registry.get(name)
    checked = _validate_args(descriptor.args_schema, dict(args or {}))
    _check_preconditions(descriptor, host)
    now = clock() if clock else 0.0

    fault_error = registry._fault_fires(name)
    if fault_error is not None:
        result = ToolResult(
            tool=name, success=False, payload={}, duration_ms=5.0, error=fault_error
        )
    else:
        before = host.snapshot() if descriptor.safety == "read_only" else None
        payload = handler(host, checked)
        if before is not None and host.snapshot() != before:
            raise ToolError(f"read_only tool {name!r} mutated host state")
        result = ToolResult(tool=name, success=True, payload=payload, duration_ms=5.0)

    if ledger is not None:
        ledger.record(
            LedgerEntry(
                kind="tool",
                name=name,
                success=result.success,
                at=now,
                duration_ms=result.duration_ms,
                error=result.error,
            )
        )
    return result


def run_shell(
    host: SimulatedHost,
    command: str,
    decision: PolicyDecision,
    ledger: InvocationLedger | None = None,
    consent_id: str | None = None,
    clock: Callable[[], float] | None = None,
) -> ToolResult:
    """Execute one shell command under an explicit policy decision.

    The decision must be for this very command. Deny-tier decisions and
    warn-tier decisions without a consent token raise before anything
    touches the host.
    """
    if decision.evaluated_command != command:
        raise ToolError(
            "policy decision does not cover this command: "
            f"{decision.evaluated_command!r} != {command!r}"
        )
    if decision.tier == TIER_DENY:
        raise DeniedCommandError(f"command is denied by policy: {command!r}")
    if decision.tier == TIER_WARN and not consent_id:
        raise MissingConsentError(f"warn-tier command lacks approved consent: {command!r}")
    if decision.tier == TIER_ALLOW:
        consent_id = None  # allow-tier runs carry no consent reference

    shell = host.execute(command)
    now = clock() if clock else 0.0
    result = ToolResult(
        tool="shell",
        success=shell.success,
        payload={
            "command": command,
            "stdout": shell.stdout,
            "exit_status": shell.exit_status,
        },
        duration_ms=shell.duration_ms,
        error=shell.error,
    )
    if ledger is not None:
        ledger.record(
            LedgerEntry(
                kind="shell",
                name=command,
                success=shell.success,
                at=now,
                duration_ms=shell.duration_ms,
                tier=decision.tier,
                rule_id=decision.rule_id,
                consent_id=consent_id,
                error=shell.error,
            )
        )
    return result


# --- default registry -------------------------------------------------------

def _uptime_handler(host: SimulatedHost, args: dict[str, Any]) -> dict[str, Any]:
    return {"uptime_seconds": host.state.uptime_seconds}


def _updates_handler(host: SimulatedHost, args: dict[str, Any]) -> dict[str, Any]:
    return {"pending_updates": host.state.pending_security_updates}


def _cpu_handler(host: SimulatedHost, args: dict[str, Any]) -> dict[str, Any]:
    top_n = args.get("top_n", 5)
    ranked = sorted(host.state.processes, key=lambda p: (-p.cpu_percent, p.name))
    return {
        "processes": [
            {"name": p.name, "cpu_percent": p.cpu_percent, "memory_mb": p.memory_mb}
            for p in ranked[:top_n]
        ]
    }


def _disk_handler(host: SimulatedHost, args: dict[str, Any]) -> dict[str, Any]:
    return {
        "mounts": [
            {"path": m.path, "used_percent": m.used_percent}
            for m in host.state.mounts
        ]
    }


def _network_handler(host: SimulatedHost, args: dict[str, Any]) -> dict[str, Any]:
    return {"link_up": host.state.network.link_up, "dns_ok": host.state.network.dns_ok}


def default_registry() -> ToolRegistry:
    """The bounded read-only diagnostic tool set."""
    registry = ToolRegistry()
    registry.register(
        ToolDescriptor(
            name="system_uptime",
            purpose="Report how long the host has been up, to spot unexpected reboots",
            preconditions=("host_reachable",),
            safety="read_only",
        ),
        _uptime_handler,
    )
    registry.register(
        ToolDescriptor(
            name="security_updates",
            purpose="Count operating-system security updates waiting to install",
            preconditions=("host_reachable",),
            safety="read_only",
        ),
        _updates_handler,
    )
    registry.register(
        ToolDescriptor(
            name="cpu_process",
            purpose="List the processes using the most CPU, busiest first",
            preconditions=("host_reachable",),
            safety="read_only",
            args_schema=(FieldSpec(name="top_n", type="int", minimum=1),),
        ),
        _cpu_handler,
    )
    registry.register(
        ToolDescriptor(
            name="disk_usage",
            purpose="Report used capacity for every mounted volume",
            preconditions=("host_reachable",),
            safety="read_only",
        ),
        _disk_handler,
    )
    registry.register(
        ToolDescriptor(
            name="network_status",
            purpose="Report link and DNS health for the primary interface",
            preconditions=("host_reachable", "network_stack_present"),
            safety="read_only",
        ),
        _network_handler,
    )
    return registry


# --- optional stdio framing -------------------------------------------------

def serve_stdio(
    registry: ToolRegistry,
    host: SimulatedHost,
    stdin: IO[str],
    stdout: IO[str],
    ledger: InvocationLedger | None = None,
) -> None:
    """Serve tool calls over line-delimited JSON until EOF.

    Request:  {"id": ..., "tool": "...", "args": {...}}
    Response: {"id": ..., "result": {tool, success, payload, duration_ms, error}}
    Malformed requests get an error response with id null when unparseable.
    """
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            stdout.write(json.dumps({"id": None, "error": "malformed request"}) + "\n")
            stdout.flush()
            continue
        req_id = request.get("id")
        try:
            result = invoke(
                registry,
                host,
                str(request.get("tool", "")),
                request.get("args") or {},
                ledger=ledger,
            )
            response = {
                "id": req_id,
                "result": {
                    "tool": result.tool,
                    "success": result.success,
                    "payload": result.payload,
                    "duration_ms": result.duration_ms,
                    "error": result.error,
                },
            }
        except ToolError as exc:
            response = {"id": req_id, "error": str(exc)}
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


class StdioToolClient:
    """Caller side of the stdio framing, for out-of-process tool servers."""

    def __init__(self, writer: IO[str], reader: IO[str]) -> None:
        self._writer = writer
        self._reader = reader
        self._next_id = 0

    def call(self, tool: str, args: dict[str, Any] | None = None) -> ToolResult:
        self._next_id += 1
        request = {"id": self._next_id, "tool": tool, "args": args or {}}
        self._writer.write(json.dumps(request) + "\n")
        self._writer.flush()
        line = self._reader.readline()
        if not line:
            raise ToolError("tool server closed the stream")
        response = json.loads(line)
        if response.get("id") != self._next_id:
            raise ToolError("out-of-order response from tool server")
        if "error" in response:
            raise ToolError(response["error"])
        raw = response["result"]
        return ToolResult(
            tool=raw["tool"],
            success=raw["success"],
            payload=raw["payload"],
            duration_ms=raw["duration_ms"],
            error=raw.get("error"),
        )
