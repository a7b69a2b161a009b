"""Scenario files: declarative replays of full support sessions.

A scenario bundles the user's issue text, a simulated host (state plus
scripted command outcomes), optional knowledge docs, a scripted decision
list for the provider, and a consent policy. Replaying one is entirely
deterministic, which is what makes the end-to-end behaviors testable.
Format details live in docs/scenario-format.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .hosts import SimulatedHost
from .knowledge import KnowledgeStore
from .policy import RuleSet, load_default_rules
from .sessions import (
    ConsentRequest,
    DeclareNoIssue,
    Decision,
    Escalate,
    Finish,
    InvokeTool,
    PlanStep,
    ProposePlan,
    RemediationPlan,
    Retrieve,
    ScriptedProvider,
    SessionConfig,
    SessionRunner,
    SessionState,
    finalize,
)
from .tools import InvocationLedger, default_registry
from .traces import TraceStore, TraceWriter


class ScenarioError(Exception):
    pass


@dataclass
class Scenario:
    name: str
    issue_text: str
    host: SimulatedHost
    decisions: list[Decision]
    knowledge_docs: list[dict[str, Any]] = field(default_factory=list)
    consent_policy: Any = "approve_all"  # approve_all | deny_all | {command: bool}
    config: SessionConfig = field(default_factory=SessionConfig)
    expected: dict[str, Any] = field(default_factory=dict)

    def consent_decider(self) -> Callable[[ConsentRequest], bool]:
        policy = self.consent_policy
        if policy == "approve_all":
            return lambda request: True
        if policy == "deny_all":
            return lambda request: False
        if isinstance(policy, dict):
            def decide(request: ConsentRequest) -> bool:
                if request.command not in policy:
                    raise ScenarioError(
                        f"scenario {self.name!r}: no consent ruling for "
                        f"{request.command!r}"
                    )
                return bool(policy[request.command])

            return decide
        raise ScenarioError(f"bad consent_policy: {policy!r}")


def _parse_decision(raw: dict[str, Any], where: str) -> Decision:
    kind = raw.get("decision")
    if kind == "invoke_tool":
        return InvokeTool(name=raw["name"], args=dict(raw.get("args", {})))
    if kind == "retrieve":
        return Retrieve(query=raw["query"])
    if kind == "propose_plan":
        steps = tuple(
            PlanStep(
                command=s["command"],
                rationale=s.get("rationale", ""),
                expected_check=s.get("check", {"kind": "command_ok"}),
                inverse_command=s.get("inverse_command"),
            )
            for s in raw["steps"]
        )
        return ProposePlan(
            plan=RemediationPlan(steps=steps, source_refs=tuple(raw.get("source_refs", ())))
        )
    if kind == "declare_no_issue":
        return DeclareNoIssue(summary=raw["summary"])
    if kind == "finish":
        return Finish(summary=raw["summary"])
    if kind == "escalate":
        return Escalate(
            findings=raw["findings"],
            recommendations=tuple(raw["recommendations"]),
        )
    raise ScenarioError(f"{where}: unknown decision {kind!r}")


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc

    for key in ("name", "issue_text", "decisions"):
        if key not in raw:
            raise ScenarioError(f"{path}: missing {key!r}")

    config_raw = raw.get("config", {})
    config = SessionConfig(
        max_cycles=int(config_raw.get("max_cycles", 25)),
        consent_timeout_seconds=float(config_raw.get("consent_timeout_seconds", 300.0)),
        replan_budget=int(config_raw.get("replan_budget", 2)),
        retrieval_k=int(config_raw.get("retrieval_k", 5)),
        retrieval_threshold=float(config_raw.get("retrieval_threshold", 0.55)),
    )
    try:
        decisions = [
            _parse_decision(d, f"{path}:decisions[{i}]")
            for i, d in enumerate(raw["decisions"])
        ]
        host = SimulatedHost.from_dict(raw.get("host", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: bad scenario: {exc}") from exc

    return Scenario(
        name=raw["name"],
        issue_text=raw["issue_text"],
        host=host,
        decisions=decisions,
        knowledge_docs=list(raw.get("knowledge", [])),
        consent_policy=raw.get("consent_policy", "approve_all"),
        config=config,
        expected=dict(raw.get("expected", {})),
    )


def build_knowledge(scenario: Scenario) -> KnowledgeStore:
    store = KnowledgeStore()
    for doc in scenario.knowledge_docs:
        store.add_text(
            doc_id=doc["id"],
            kind=doc.get("kind", "article"),
            title=doc.get("title", ""),
            body=doc.get("body", ""),
            updated_at=float(doc.get("updated_at", 0.0)),
        )
    return store


@dataclass
class ReplayResult:
    session: SessionState
    events: list
    summary: str
    ledger: InvocationLedger


def replay(
    scenario: Scenario,
    trace_root,
    rules: RuleSet | None = None,
    session_id: str | None = None,
    clock: Callable[[], float] | None = None,
    durable: bool = True,
) -> ReplayResult:
    """Run a scenario to completion and return its terminal state."""
    import time as _time

    rules = rules or load_default_rules()
    store = TraceStore(trace_root, durable=durable)
    sid = session_id or f"{scenario.name}-{_time.strftime('%Y%m%dT%H%M%S')}"
    writer = TraceWriter(store, sid, clock=clock or _time.time)
    ledger = InvocationLedger()
    runner = SessionRunner(
        rules=rules,
        registry=default_registry(),
        host=scenario.host.clone(),
        knowledge=build_knowledge(scenario),
        writer=writer,
        ledger=ledger,
        config=scenario.config,
        clock=clock or _time.time,
    )
    provider = ScriptedProvider(scenario.decisions)
    runner.start_session(scenario.issue_text)
    session = runner.run_to_completion(provider, consent_decider=scenario.consent_decider())
    events = store.read(sid)
    summary = finalize(session, events)
    return ReplayResult(session=session, events=events, summary=summary, ledger=ledger)
