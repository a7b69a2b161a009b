"""Session engine: one support session through diagnose/retrieve/remediate.

The engine is deliberately synchronous and single-strand per session: step()
performs exactly one unit of work (one provider consultation, or one plan
step) and emits trace events for everything it did. Blocking concerns —
waiting for a human to answer a consent request — are expressed as a
WAITING outcome so a thread-based runtime can park on the mailbox condition
while a test can drive the same engine step by step with a fake clock.

Counting rule: a "reasoning cycle" is one provider consultation. Tool
invocations and shell steps triggered by a decision do not add cycles.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from .knowledge import ContextPackage, KnowledgeStore
from .policy import PolicyDecision, RuleSet, TIER_DENY, TIER_WARN, evaluate, explain
from .tools import (
    InvocationLedger,
    ToolError,
    ToolRegistry,
    ToolResult,
    invoke,
    ledger_stats,
    run_shell,
)
from .traces import TraceWriter

PHASES = (
    "intake",
    "diagnosing",
    "retrieving",
    "planning",
    "remediating",
    "resolved",
    "no_issue",
    "escalated",
)
TERMINAL_PHASES = ("resolved", "no_issue", "escalated")

CHECK_OPS = ("eq", "ne", "lt", "le", "gt", "ge", "lt_previous", "le_previous")


class SessionError(Exception):
    pass


class ProviderError(SessionError):
    """The reasoning provider failed or ran out of scripted decisions."""


class ConsentError(SessionError):
    pass


class UnknownConsentError(ConsentError):
    pass


class AlreadyResolvedError(ConsentError):
    pass


@dataclass
class SessionConfig:
    max_cycles: int = 25
    consent_timeout_seconds: float = 300.0
    replan_budget: int = 2
    retrieval_k: int = 5
    retrieval_threshold: float = 0.55


# --- plans and checks --------------------------------------------------------


def _validate_check(check: dict[str, Any]) -> dict[str, Any]:
    kind = check.get("kind")
    if kind == "command_ok":
        return {"kind": "command_ok"}
    if kind == "tool_compare":
        op = check.get("op")
        if op not in CHECK_OPS:
            raise SessionError(f"check op must be one of {CHECK_OPS}, got {op!r}")
        if not check.get("tool"):
            raise SessionError("tool_compare check needs a 'tool'")
        if not check.get("field"):
            raise SessionError("tool_compare check needs a 'field'")
        if not op.endswith("_previous") and "value" not in check:
            raise SessionError(f"check op {op!r} needs a 'value'")
        return {
            "kind": "tool_compare",
            "tool": check["tool"],
            "args": dict(check.get("args", {})),
            "field": check["field"],
            "op": op,
            "value": check.get("value"),
        }
    raise SessionError(f"unknown check kind: {kind!r}")


@dataclass(frozen=True)
class PlanStep:
    command: str
    rationale: str = ""
    expected_check: dict[str, Any] = field(default_factory=lambda: {"kind": "command_ok"})
    inverse_command: str | None = None

    def __post_init__(self) -> None:
        if not self.command:
            raise SessionError("plan step needs a command")
        object.__setattr__(self, "expected_check", _validate_check(self.expected_check))

    @property
    def reversible(self) -> bool:
        return self.inverse_command is not None


@dataclass(frozen=True)
class RemediationPlan:
    steps: tuple[PlanStep, ...]
    source_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.steps:
            raise SessionError("plan needs at least one step")


def extract_field(payload: dict[str, Any], path: str) -> Any:
    """Walk a dotted path with [key=value] list selectors.

    "uptime_seconds" → payload["uptime_seconds"]
    "processes[name=chrome].cpu_percent" → that process's cpu_percent
    """
    current: Any = payload
    for part in path.split("."):
        selector = None
        if "[" in part:
            if not part.endswith("]"):
                raise SessionError(f"malformed field path segment: {part!r}")
            part, _, rest = part.partition("[")
            key, _, wanted = rest[:-1].partition("=")
            selector = (key, wanted)
        if part:
            if not isinstance(current, dict) or part not in current:
                raise SessionError(f"field path {path!r}: missing key {part!r}")
            current = current[part]
        if selector is not None:
            key, wanted = selector
            if not isinstance(current, list):
                raise SessionError(f"field path {path!r}: {part!r} is not a list")
            for item in current:
                if isinstance(item, dict) and str(item.get(key)) == wanted:
                    current = item
                    break
            else:
                raise SessionError(f"field path {path!r}: no item with {key}={wanted}")
    return current


def _compare(op: str, observed: Any, reference: Any) -> bool:
    if op in ("eq",):
        return observed == reference
    if op == "ne":
        return observed != reference
    if op in ("lt", "lt_previous"):
        return observed < reference
    if op in ("le", "le_previous"):
        return observed <= reference
    if op == "gt":
        return observed > reference
    if op == "ge":
        return observed >= reference
    raise SessionError(f"unknown op {op!r}")


# --- consent -----------------------------------------------------------------


@dataclass
class ConsentRequest:
    request_id: str
    session_id: str
    command: str
    explanation: str
    requested_at: float
    expires_at: float
    step_index: int
    status: str = "pending"  # pending | approved | denied | expired


class ConsentMailbox:
    """The one cross-strand channel: consent requests out, responses in."""

    def __init__(self) -> None:
        self._requests: dict[str, ConsentRequest] = {}
        self._condition = threading.Condition()

    def create(
        self,
        session_id: str,
        command: str,
        explanation: str,
        now: float,
        timeout_seconds: float,
        step_index: int,
    ) -> ConsentRequest:
        request = ConsentRequest(
            request_id=uuid.uuid4().hex,
            session_id=session_id,
            command=command,
            explanation=explanation,
            requested_at=now,
            expires_at=now + timeout_seconds,
            step_index=step_index,
        )
        with self._condition:
            self._requests[request.request_id] = request
        return request

    def get(self, request_id: str) -> ConsentRequest:
        with self._condition:
            request = self._requests.get(request_id)
        if request is None:
            raise UnknownConsentError(f"unknown consent request: {request_id!r}")
        return request

    def resolve(self, request_id: str, approved: bool) -> ConsentRequest:
        with self._condition:
            request = self._requests.get(request_id)
            if request is None:
                raise UnknownConsentError(f"unknown consent request: {request_id!r}")
            if request.status != "pending":
                raise AlreadyResolvedError(
                    f"consent {request_id!r} already {request.status}"
                )
            request.status = "approved" if approved else "denied"
            self._condition.notify_all()
        return request

    def expire_overdue(self, now: float) -> list[ConsentRequest]:
        expired = []
        with self._condition:
            for request in self._requests.values():
                if request.status == "pending" and now >= request.expires_at:
                    request.status = "expired"
                    expired.append(request)
            if expired:
                self._condition.notify_all()
        return expired

    def expire_all_pending(self) -> list[ConsentRequest]:
        expired = []
        with self._condition:
            for request in self._requests.values():
                if request.status == "pending":
                    request.status = "expired"
                    expired.append(request)
            if expired:
                self._condition.notify_all()
        return expired

    def pending(self, session_id: str | None = None) -> list[ConsentRequest]:
        with self._condition:
            return [
                r
                for r in self._requests.values()
                if r.status == "pending"
                and (session_id is None or r.session_id == session_id)
            ]

    def wait_for_resolution(self, request_id: str, timeout: float | None) -> str:
        """Block until the request leaves pending; returns the final status."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._condition:
            while True:
                request = self._requests.get(request_id)
                if request is None:
                    raise UnknownConsentError(f"unknown consent request: {request_id!r}")
                if request.status != "pending":
                    return request.status
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return "pending"
                self._condition.wait(timeout=remaining)


# --- provider decisions ------------------------------------------------------


@dataclass(frozen=True)
class InvokeTool:
    name: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Retrieve:
    query: str


@dataclass(frozen=True)
class ProposePlan:
    plan: RemediationPlan


@dataclass(frozen=True)
class DeclareNoIssue:
    summary: str


@dataclass(frozen=True)
class Finish:
    summary: str


@dataclass(frozen=True)
class EscalationPackage:
    session_id: str
    findings: str
    attempted_steps: tuple[str, ...]
    recommendations: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.recommendations:
            raise SessionError("escalation needs at least one recommendation")


@dataclass(frozen=True)
class Escalate:
    findings: str
    recommendations: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.recommendations:
            raise SessionError("escalation needs at least one recommendation")


Decision = InvokeTool | Retrieve | ProposePlan | DeclareNoIssue | Finish | Escalate


class ScriptedProvider:
    """Replays an ordered list of decisions; exhaustion is a provider error."""

    def __init__(self, decisions: list[Decision]) -> None:
        self._queue = list(decisions)

    def decide(self, session: "SessionState") -> Decision:
        if not self._queue:
            raise ProviderError("scripted provider has no decisions left")
        return self._queue.pop(0)


class HeuristicProvider:
    """Tiny keyword-driven demo provider: probe, then report findings.

    Not a planner. It exists so the HTTP endpoint has something to run when
    no scenario is loaded; it only ever uses read-only tools and never
    proposes shell commands.
    """

    _PROBES = (
        ("slow", "cpu_process"),
        ("fast", "cpu_process"),
        ("disk", "disk_usage"),
        ("space", "disk_usage"),
        ("network", "network_status"),
        ("internet", "network_status"),
        ("update", "security_updates"),
        ("restart", "system_uptime"),
        ("reboot", "system_uptime"),
    )

    def decide(self, session: "SessionState") -> Decision:
        issue = session.issue_text.lower()
        wanted = [tool for keyword, tool in self._PROBES if keyword in issue]
        if not wanted:
            wanted = ["cpu_process", "disk_usage"]
        for tool in dict.fromkeys(wanted):
            if tool not in session.diagnostic_profile:
                return InvokeTool(name=tool)
        lines = []
        for name, result in session.diagnostic_profile.items():
            lines.append(f"{name}: {result.payload}")
        return DeclareNoIssue(
            summary="Diagnostics show no anomaly requiring remediation. "
            + " | ".join(lines)
        )


# --- session state -----------------------------------------------------------


@dataclass
class ExecutedStep:
    step_index: int
    step: PlanStep
    success: bool
    consent_id: str | None


@dataclass
class SessionState:
    session_id: str
    issue_text: str
    config: SessionConfig
    phase: str = "intake"
    cycle_count: int = 0
    diagnostic_profile: dict[str, ToolResult] = field(default_factory=dict)
    context: ContextPackage | None = None
    plan: RemediationPlan | None = None
    plan_decisions: list[PolicyDecision] = field(default_factory=list)
    plan_cursor: int = 0
    replan_remaining: int = 2
    executed_steps: list[ExecutedStep] = field(default_factory=list)
    pending_consent_id: str | None = None
    started_at: float = 0.0
    ended_at: float | None = None
    outcome_summary: str = ""

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL_PHASES

    def public_view(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "issue_text": self.issue_text,
            "phase": self.phase,
            "cycle_count": self.cycle_count,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "outcome_summary": self.outcome_summary,
            "pending_consent_id": self.pending_consent_id,
        }


@dataclass
class StepOutcome:
    """What one engine step did and whether it is parked on a consent."""

    events: list[Any]
    waiting_on: str | None = None
    terminal: bool = False


# --- the engine --------------------------------------------------------------


class SessionRunner:
    def __init__(
        self,
        rules: RuleSet,
        registry: ToolRegistry,
        host,
        knowledge: KnowledgeStore,
        writer: TraceWriter,
        mailbox: ConsentMailbox | None = None,
        ledger: InvocationLedger | None = None,
        config: SessionConfig | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.rules = rules
        self.registry = registry
        self.host = host
        self.knowledge = knowledge
        self.writer = writer
        self.mailbox = mailbox or ConsentMailbox()
        # explicit None check: an empty ledger is falsy (it has __len__)
        self.ledger = ledger if ledger is not None else InvocationLedger()
        self.config = config or SessionConfig()
        self.clock = clock
        self.session: SessionState | None = None
        self._step_events: list = []

    def _emit(self, kind: str, payload: dict[str, Any]):
        event = self.writer.emit(kind, payload)
        self._step_events.append(event)
        return event

    # -- lifecycle ------------------------------------------------------

    def start_session(self, issue_text: str) -> SessionState:
        if not issue_text or not issue_text.strip():
            raise SessionError("issue_text must be non-empty")
        session = SessionState(
            session_id=self.writer.session_id,
            issue_text=issue_text,
            config=self.config,
            replan_remaining=self.config.replan_budget,
            started_at=self.clock(),
        )
        self.session = session
        self._emit("session_started", {"issue_text": issue_text})
        return session

    def _end(self, session: SessionState, phase: str, summary: str) -> None:
        session.phase = phase
        session.outcome_summary = summary
        session.ended_at = self.clock()
        shell = ledger_stats(self.ledger, kind="shell")
        self._emit(
            "session_ended",
            {
                "phase": phase,
                "outcome_summary": summary,
                "cycle_count": session.cycle_count,
                "shell_total": shell.total_calls,
                "shell_successes": shell.successes,
            },
        )

    def _escalate(self, session: SessionState, package: EscalationPackage) -> None:
        self._emit(
            "escalated",
            {
                "findings": package.findings,
                "attempted_steps": list(package.attempted_steps),
                "recommendations": list(package.recommendations),
            },
        )
        self._end(session, "escalated", package.findings)

    def _auto_escalate(self, session: SessionState, findings: str, extra: str) -> None:
        package = EscalationPackage(
            session_id=session.session_id,
            findings=findings,
            attempted_steps=tuple(
                e.step.command for e in session.executed_steps
            ),
            recommendations=(
                extra,
                "Review the session trace with a human technician.",
                "Contact IT support through the standard escalation queue.",
            ),
        )
        self._escalate(session, package)

    # -- consent --------------------------------------------------------

    def resolve_consent(self, request_id: str, approved: bool) -> ConsentRequest:
        """Record a user's consent response and wake the session strand.

        The gated step itself executes on the session's next engine step;
        this call only transitions the request and emits the trace event.
        """
        request = self.mailbox.resolve(request_id, approved)
        self._emit(
            "consent_resolved",
            {"request_id": request.request_id, "status": request.status},
        )
        return request

    def _sweep_expired(self, session: SessionState) -> None:
        for request in self.mailbox.expire_overdue(self.clock()):
            self._emit(
                "consent_resolved",
                {"request_id": request.request_id, "status": "expired"},
            )

    # -- main step ------------------------------------------------------

    def step(self, provider) -> StepOutcome:
        """Advance the session by one unit of work."""
        session = self.session
        if session is None:
            raise SessionError("no session started")
        if session.terminal:
            raise SessionError("session already terminal")

        self._step_events = []
        self._sweep_expired(session)

        if session.phase == "remediating":
            outcome = self._step_remediation(session)
        else:
            outcome = self._consult_provider(session, provider)
        outcome.events = self._step_events
        outcome.terminal = session.terminal
        return outcome

    def run_to_completion(
        self,
        provider,
        consent_decider: Callable[[ConsentRequest], bool] | None = None,
        max_steps: int = 1000,
    ) -> SessionState:
        """Drive step() until terminal, answering consents via the decider.

        With no decider, pending consents simply expire when the clock
        passes their deadline; a test clock must advance itself.
        """
        session = self.session
        if session is None:
            raise SessionError("no session started")
        for _ in range(max_steps):
            if session.terminal:
                return session
            outcome = self.step(provider)
            if outcome.waiting_on is not None:
                request = self.mailbox.get(outcome.waiting_on)
                if request.status == "pending":
                    if consent_decider is not None:
                        self.resolve_consent(
                            request.request_id, consent_decider(request)
                        )
                    else:
                        status = self.mailbox.wait_for_resolution(
                            request.request_id,
                            timeout=max(0.0, request.expires_at - self.clock()),
                        )
                        if status == "pending":
                            # Deadline passed with no answer: expire it now.
                            for expired in self.mailbox.expire_overdue(
                                request.expires_at
                            ):
                                self._emit(
                                    "consent_resolved",
                                    {
                                        "request_id": expired.request_id,
                                        "status": "expired",
                                    },
                                )
                        elif status == "expired":
                            # Expired from outside this thread (service
                            # shutdown); the expirer does not own this trace,
                            # so the denial is recorded here.
                            self._emit(
                                "consent_resolved",
                                {"request_id": request.request_id, "status": "expired"},
                            )
        raise SessionError("session did not terminate within max_steps")

    # -- provider consultation -------------------------------------------

    def _consult_provider(self, session: SessionState, provider) -> StepOutcome:
        if session.cycle_count >= self.config.max_cycles:
            self._auto_escalate(
                session,
                findings=(
                    f"Reasoning cycle budget exhausted after {session.cycle_count} "
                    "cycles without resolution."
                ),
                extra="Increase the cycle budget or hand the case to a technician.",
            )
            return StepOutcome(events=[])

        try:
            decision = provider.decide(session)
        except Exception as exc:
            session.cycle_count += 1
            self._emit(
                "cycle",
                {"number": session.cycle_count, "decision": "provider_error",
                 "error": str(exc)},
            )
            self._auto_escalate(
                session,
                findings=f"Reasoning provider failed: {exc}",
                extra="Inspect the reasoning provider configuration.",
            )
            return StepOutcome(events=[])

        session.cycle_count += 1

        if isinstance(decision, InvokeTool):
            self._emit(
                "cycle",
                {"number": session.cycle_count, "decision": "invoke_tool",
                 "tool": decision.name, "args": decision.args},
            )
            session.phase = "diagnosing"
            self._invoke_tool(session, decision.name, decision.args)
            return StepOutcome(events=[])

        if isinstance(decision, Retrieve):
            session.phase = "retrieving"
            package = self.knowledge.retrieve(
                decision.query,
                k=self.config.retrieval_k,
                threshold=self.config.retrieval_threshold,
            )
            session.context = package
            self._emit(
                "cycle",
                {
                    "number": session.cycle_count,
                    "decision": "retrieve",
                    "query": decision.query,
                    "hits": [
                        {"doc_id": h.doc_id, "score": h.score} for h in package.hits
                    ],
                },
            )
            return StepOutcome(events=[])

        if isinstance(decision, ProposePlan):
            self._emit(
                "cycle",
                {"number": session.cycle_count, "decision": "propose_plan",
                 "step_count": len(decision.plan.steps)},
            )
            return self._adopt_plan(session, decision.plan)

        if isinstance(decision, DeclareNoIssue):
            self._emit(
                "cycle",
                {"number": session.cycle_count, "decision": "declare_no_issue"},
            )
            self._end(session, "no_issue", decision.summary)
            return StepOutcome(events=[])

        if isinstance(decision, Finish):
            self._emit(
                "cycle", {"number": session.cycle_count, "decision": "finish"}
            )
            self._end(session, "resolved", decision.summary)
            return StepOutcome(events=[])

        if isinstance(decision, Escalate):
            self._emit(
                "cycle", {"number": session.cycle_count, "decision": "escalate"}
            )
            self._escalate(
                session,
                EscalationPackage(
                    session_id=session.session_id,
                    findings=decision.findings,
                    attempted_steps=tuple(
                        e.step.command for e in session.executed_steps
                    ),
                    recommendations=decision.recommendations,
                ),
            )
            return StepOutcome(events=[])

        raise SessionError(f"provider returned unknown decision: {decision!r}")

    def _invoke_tool(self, session: SessionState, name: str, args: dict) -> None:
        try:
            result = invoke(
                self.registry, self.host, name, args,
                ledger=self.ledger, clock=self.clock,
            )
        except ToolError as exc:
            result = ToolResult(
                tool=name, success=False, payload={}, duration_ms=0.0, error=str(exc)
            )
        session.diagnostic_profile[name] = result
        self._emit(
            "tool_invoked",
            {
                "tool": name,
                "args": args,
                "success": result.success,
                "payload": result.payload,
                "error": result.error,
                "duration_ms": result.duration_ms,
            },
        )

    # -- planning ---------------------------------------------------------

    def _adopt_plan(self, session: SessionState, plan: RemediationPlan) -> StepOutcome:
        decisions = []
        denied: list[int] = []
        for index, step in enumerate(plan.steps):
            decision = evaluate(step.command, self.rules)
            decisions.append(decision)
            self._emit(
                "policy_decision",
                {
                    "command": step.command,
                    "tier": decision.tier,
                    "rule_id": decision.rule_id,
                    "message": decision.message,
                    "context": "plan",
                    "step_index": index,
                },
            )
            if decision.tier == TIER_DENY:
                denied.append(index)

        accepted = not denied
        self._emit(
            "plan_proposed",
            {
                "steps": [
                    {
                        "command": s.command,
                        "rationale": s.rationale,
                        "reversible": s.reversible,
                        "tier": d.tier,
                    }
                    for s, d in zip(plan.steps, decisions)
                ],
                "accepted": accepted,
                "rejected_steps": denied,
                "source_refs": list(plan.source_refs),
            },
        )

        if not accepted:
            if session.replan_remaining <= 0:
                self._auto_escalate(
                    session,
                    findings="Plan rejected by policy and the revision budget is spent.",
                    extra="Author a remediation plan avoiding denied commands.",
                )
            else:
                session.replan_remaining -= 1
                session.phase = "planning"
            return StepOutcome(events=[])

        session.plan = plan
        session.plan_decisions = decisions
        session.plan_cursor = 0
        session.phase = "remediating"
        return StepOutcome(events=[])

    # -- remediation ------------------------------------------------------

    def _step_remediation(self, session: SessionState) -> StepOutcome:
        plan = session.plan
        if plan is None:
            raise SessionError("remediating with no plan")

        if session.plan_cursor >= len(plan.steps):
            # Plan ran out; hand control back to the provider to finish,
            # extend, or escalate.
            session.phase = "planning"
            return StepOutcome(events=[])

        index = session.plan_cursor
        step = plan.steps[index]
        decision = session.plan_decisions[index]

        consent_id: str | None = None
        if decision.tier == TIER_WARN:
            request = self._consent_for_step(session, index, step, decision)
            if request.status == "pending":
                return StepOutcome(events=[], waiting_on=request.request_id)
            if request.status in ("denied", "expired"):
                # Skip the step; the provider hears about it next cycle.
                session.pending_consent_id = None
                session.plan_cursor = len(plan.steps)  # abandon the rest of the plan
                session.phase = "planning"
                return StepOutcome(events=[])
            consent_id = request.request_id
        session.pending_consent_id = None

        result = run_shell(
            self.host, step.command, decision,
            ledger=self.ledger, consent_id=consent_id, clock=self.clock,
        )
        session.executed_steps.append(
            ExecutedStep(step_index=index, step=step, success=result.success,
                         consent_id=consent_id)
        )
        self._emit(
            "step_executed",
            {
                "step_index": index,
                "command": step.command,
                "success": result.success,
                "error": result.error,
                "duration_ms": result.duration_ms,
                "tier": decision.tier,
                "rule_id": decision.rule_id,
                "consent_id": consent_id,
                "reversible": step.reversible,
            },
        )
        session.plan_cursor += 1

        passed, observed = self._verify_step(session, step, result)
        self._emit(
            "step_verified",
            {
                "step_index": index,
                "passed": passed,
                "check": step.expected_check,
                "observed": observed,
            },
        )
        if not passed:
            if session.replan_remaining <= 0:
                self._auto_escalate(
                    session,
                    findings=(
                        f"Step {index} ({step.command!r}) failed verification and "
                        "the revision budget is spent."
                    ),
                    extra="Escalate to a technician with the attempted steps.",
                )
            else:
                session.replan_remaining -= 1
                session.phase = "planning"
        return StepOutcome(events=[])

    def _consent_for_step(
        self,
        session: SessionState,
        index: int,
        step: PlanStep,
        decision: PolicyDecision,
    ) -> ConsentRequest:
        if session.pending_consent_id is not None:
            request = self.mailbox.get(session.pending_consent_id)
            if request.step_index == index:
                return request
        request = self.mailbox.create(
            session_id=session.session_id,
            command=step.command,
            explanation=explain(decision),
            now=self.clock(),
            timeout_seconds=self.config.consent_timeout_seconds,
            step_index=index,
        )
        session.pending_consent_id = request.request_id
        self._emit(
            "consent_requested",
            {
                "request_id": request.request_id,
                "command": step.command,
                "explanation": request.explanation,
                "step_index": index,
                "expires_at": request.expires_at,
            },
        )
        return request

    def _verify_step(
        self, session: SessionState, step: PlanStep, result: ToolResult
    ) -> tuple[bool, Any]:
        check = step.expected_check
        if check["kind"] == "command_ok":
            return result.success, {"command_success": result.success}
        # tool_compare: re-probe and compare the extracted field.
        if not result.success:
            return False, {"command_success": False}
        previous = session.diagnostic_profile.get(check["tool"])
        probe = invoke(
            self.registry, self.host, check["tool"], check["args"],
            ledger=self.ledger, clock=self.clock,
        )
        session.diagnostic_profile[check["tool"]] = probe
        self._emit(
            "tool_invoked",
            {
                "tool": check["tool"],
                "args": check["args"],
                "success": probe.success,
                "payload": probe.payload,
                "error": probe.error,
                "duration_ms": probe.duration_ms,
                "context": "verification",
            },
        )
        if not probe.success:
            return False, {"probe_error": probe.error}
        try:
            observed = extract_field(probe.payload, check["field"])
        except SessionError as exc:
            return False, {"extract_error": str(exc)}
        op = check["op"]
        if op.endswith("_previous"):
            if previous is None or not previous.success:
                return False, {"error": "no previous probe to compare against"}
            try:
                reference = extract_field(previous.payload, check["field"])
            except SessionError as exc:
                return False, {"extract_error": str(exc)}
        else:
            reference = check["value"]
        try:
            passed = _compare(op, observed, reference)
        except TypeError:
            return False, {"error": "incomparable values", "observed": observed}
        return passed, {"observed": observed, "reference": reference}

    # -- rollback ---------------------------------------------------------

    def rollback(
        self,
        through_step: int | None = None,
        consent_decider: Callable[[ConsentRequest], bool] | None = None,
    ) -> list[dict[str, Any]]:
        """Undo executed steps in reverse order via their inverse commands.

        Each inverse is policy-evaluated like any other command. A denied
        inverse halts the rollback (remaining steps stay applied); a
        warn-tier inverse needs the consent decider, otherwise it halts
        too. Steps without an inverse are reported, not skipped silently.
        Returns the rollback report entries (also emitted as events).
        """
        session = self.session
        if session is None:
            raise SessionError("no session started")
        todo = [
            e for e in session.executed_steps
            if e.success and (through_step is None or e.step_index <= through_step)
        ]
        report: list[dict[str, Any]] = []
        for executed in reversed(todo):
            entry: dict[str, Any] = {"step_index": executed.step_index}
            step = executed.step
            if step.inverse_command is None:
                entry.update(status="irreversible", command=step.command)
                report.append(entry)
                self._emit("rollback", entry)
                continue
            inverse = step.inverse_command
            decision = evaluate(inverse, self.rules)
            self._emit(
                "policy_decision",
                {
                    "command": inverse,
                    "tier": decision.tier,
                    "rule_id": decision.rule_id,
                    "message": decision.message,
                    "context": "rollback",
                    "step_index": executed.step_index,
                },
            )
            if decision.tier == TIER_DENY:
                entry.update(status="halted_denied", command=inverse)
                report.append(entry)
                self._emit("rollback", entry)
                break
            consent_id = None
            if decision.tier == TIER_WARN:
                request = self.mailbox.create(
                    session_id=session.session_id,
                    command=inverse,
                    explanation=explain(decision),
                    now=self.clock(),
                    timeout_seconds=self.config.consent_timeout_seconds,
                    step_index=executed.step_index,
                )
                self._emit(
                    "consent_requested",
                    {
                        "request_id": request.request_id,
                        "command": inverse,
                        "explanation": request.explanation,
                        "step_index": executed.step_index,
                        "expires_at": request.expires_at,
                    },
                )
                if consent_decider is None:
                    self.mailbox.resolve(request.request_id, False)
                    self._emit(
                        "consent_resolved",
                        {"request_id": request.request_id, "status": "denied"},
                    )
                    entry.update(status="halted_consent", command=inverse)
                    report.append(entry)
                    self._emit("rollback", entry)
                    break
                approved = consent_decider(request)
                self.mailbox.resolve(request.request_id, approved)
                self._emit(
                    "consent_resolved",
                    {
                        "request_id": request.request_id,
                        "status": "approved" if approved else "denied",
                    },
                )
                if not approved:
                    entry.update(status="halted_consent", command=inverse)
                    report.append(entry)
                    self._emit("rollback", entry)
                    break
                consent_id = request.request_id
            result = run_shell(
                self.host, inverse, decision,
                ledger=self.ledger, consent_id=consent_id, clock=self.clock,
            )
            entry.update(
                status="executed" if result.success else "failed",
                command=inverse,
                error=result.error,
            )
            report.append(entry)
            self._emit("rollback", entry)
            if not result.success:
                break
        return report


# --- summaries ---------------------------------------------------------------


def finalize(session: SessionState, events: list) -> str:
    """Render a terminal session's trace as a human-readable summary."""
    if not session.terminal:
        raise SessionError("finalize requires a terminal session")

    lines: list[str] = []
    recommendations: list[str] = []
    shell_total = 0
    shell_successes = 0
    for event in events:
        payload = event.payload
        kind = event.kind
        if kind == "tool_invoked":
            status = "ok" if payload.get("success") else f"failed ({payload.get('error')})"
            lines.append(f"Invoked {payload.get('tool')} [{status}]")
        elif kind == "cycle" and payload.get("decision") == "retrieve":
            hits = payload.get("hits", [])
            lines.append(
                f"Retrieved {len(hits)} knowledge item(s) for query "
                f"\"{payload.get('query', '')}\""
            )
        elif kind == "plan_proposed":
            verdict = "accepted" if payload.get("accepted") else "rejected by policy"
            lines.append(
                f"Proposed remediation plan with {len(payload.get('steps', []))} "
                f"step(s) [{verdict}]"
            )
        elif kind == "consent_requested":
            lines.append(f"Requested user consent for: {payload.get('command')}")
        elif kind == "consent_resolved":
            lines.append(f"Consent {payload.get('status')}")
        elif kind == "step_executed":
            shell_total += 1
            if payload.get("success"):
                shell_successes += 1
                lines.append(f"Executed: {payload.get('command')} [ok]")
            else:
                lines.append(
                    f"Executed: {payload.get('command')} "
                    f"[failed - {payload.get('error')}]"
                )
        elif kind == "step_verified":
            lines.append(
                "Verification "
                + ("passed" if payload.get("passed") else "failed")
                + f" for step {payload.get('step_index')}"
            )
        elif kind == "rollback":
            lines.append(
                f"Rollback {payload.get('status')}: {payload.get('command', '')}"
            )
        elif kind == "escalated":
            recommendations = list(payload.get("recommendations", []))
            lines.append(
                f"Escalated with {len(recommendations)} recommendation(s)"
            )

    parts = ["User Request:", session.issue_text, "", "Execution Trace:"]
    if lines:
        parts.extend(f"{i}. {line}" for i, line in enumerate(lines, start=1))
    else:
        parts.append("(no actions recorded)")
    parts.extend(["", "Resolution:"])

    if session.phase == "no_issue":
        parts.append(session.outcome_summary)
        parts.append("No remediation actions executed.")
    elif session.phase == "escalated":
        parts.append(session.outcome_summary)
        if recommendations:
            parts.append("Recommended next steps:")
            parts.extend(
                f"{i}. {rec}" for i, rec in enumerate(recommendations, start=1)
            )
    else:
        parts.append(session.outcome_summary)
        if shell_total:
            rate = 100.0 * shell_successes / shell_total
            parts.extend(
                [
                    "",
                    "Execution Summary:",
                    f"- Total shell commands executed: {shell_total}.",
                    f"- Successful command rate: {rate:.1f}%.",
                ]
            )
    return "\n".join(parts)
