"""Deterministic allow/warn/deny classification of proposed shell commands.

Rules are small declarative JSON documents with a closed set of matcher
kinds (exact, substring_all, regex). Evaluation is a pure function of
(command, rule set): no I/O, no clock, no randomness, so a loaded rule set
is safe for unlimited concurrent readers and reloads swap in atomically.

A rule matches a command when ANY of its matchers matches; conjunction of
substrings is expressed inside a single substring_all matcher. Precedence
across matched rules is deny > warn > allow, ties broken by document
order. Commands matched by no rule fall back to warn, never allow.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

TIER_ALLOW = "allow"
TIER_WARN = "warn"
TIER_DENY = "deny"
TIERS = (TIER_ALLOW, TIER_WARN, TIER_DENY)

MATCHER_KINDS = ("exact", "substring_all", "regex")

DEFAULT_WARN_MESSAGE = (
    "No policy rule matched this command; it requires approval before it can run."
)

_SEVERITY = {TIER_DENY: 2, TIER_WARN: 1, TIER_ALLOW: 0}

_CONSEQUENCE = {
    TIER_ALLOW: "will run automatically",
    TIER_WARN: "needs your approval before it runs",
    TIER_DENY: "is blocked and will not run",
}

# Portable regex subset: backreferences are rejected because their semantics
# differ across engines.
_BACKREF_RE = re.compile(r"\\[1-9]")


class PolicyError(Exception):
    """Base class for policy loading failures."""


class PolicyParseError(PolicyError):
    """Rule document does not conform to the rule-file schema."""


class DuplicateRuleIdError(PolicyParseError):
    """Two rules in one document share an id."""


@dataclass(frozen=True)
class Matcher:
    """One pattern test against a command string."""

    kind: str
    case_sensitive: bool
    pattern: str = ""
    patterns: tuple[str, ...] = ()

    def matches(self, command: str) -> bool:
        if self.kind == "exact":
            if self.case_sensitive:
                return command == self.pattern
            return command.lower() == self.pattern.lower()
        if self.kind == "substring_all":
            haystack = command if self.case_sensitive else command.lower()
            needles = (
                self.patterns
                if self.case_sensitive
                else tuple(p.lower() for p in self.patterns)
            )
            return all(n in haystack for n in needles)
        if self.kind == "regex":
            flags = 0 if self.case_sensitive else re.IGNORECASE
            return re.search(self.pattern, command, flags) is not None
        raise ValueError(f"unknown matcher kind: {self.kind!r}")


@dataclass(frozen=True)
class PolicyRule:
    id: str
    tier: str
    matchers: tuple[Matcher, ...]
    message: str
    reversible_hint: bool | None = None

    def matches(self, command: str) -> bool:
        return any(m.matches(command) for m in self.matchers)


@dataclass(frozen=True)
class PolicyDecision:
    """Tiered verdict for one evaluated command.

    rule_id is None when no rule matched and the warn default applied;
    evaluated_command is always the exact, unmodified input.
    """

    tier: str
    rule_id: str | None
    message: str
    evaluated_command: str


@dataclass(frozen=True)
class RuleSet:
    """Immutable, ordered collection of rules from one document."""

    rules: tuple[PolicyRule, ...]

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)


@dataclass(frozen=True)
class LintDiagnostic:
    code: str
    message: str
    rule_id: str | None = None


def _parse_matcher(raw: object, where: str) -> Matcher:
    if not isinstance(raw, dict):
        raise PolicyParseError(f"{where}: matcher must be an object")
    kind = raw.get("kind")
    if kind not in MATCHER_KINDS:
        raise PolicyParseError(f"{where}: matcher kind must be one of {MATCHER_KINDS}")
    case_sensitive = raw.get("case_sensitive")
    if not isinstance(case_sensitive, bool):
        raise PolicyParseError(f"{where}: case_sensitive must be a boolean")
    if kind == "substring_all":
        patterns = raw.get("patterns")
        if (
            not isinstance(patterns, list)
            or not patterns
            or not all(isinstance(p, str) and p for p in patterns)
        ):
            raise PolicyParseError(
                f"{where}: substring_all needs a non-empty 'patterns' list of strings"
            )
        return Matcher(kind=kind, case_sensitive=case_sensitive, patterns=tuple(patterns))
    pattern = raw.get("pattern")
    if not isinstance(pattern, str) or not pattern:
        raise PolicyParseError(f"{where}: {kind} matcher needs a non-empty 'pattern'")
    if kind == "regex":
        if _BACKREF_RE.search(pattern):
            raise PolicyParseError(
                f"{where}: backreferences are outside the portable regex subset"
            )
        try:
            re.compile(pattern)
        except re.error as exc:
            raise PolicyParseError(f"{where}: invalid regex: {exc}") from exc
    return Matcher(kind=kind, case_sensitive=case_sensitive, pattern=pattern)


def _parse_rule(raw: object, index: int) -> PolicyRule:
    where = f"rules[{index}]"
    if not isinstance(raw, dict):
        raise PolicyParseError(f"{where}: rule must be an object")
    rule_id = raw.get("id")
    if not isinstance(rule_id, str) or not rule_id:
        raise PolicyParseError(f"{where}: 'id' must be a non-empty string")
    tier = raw.get("tier")
    if tier not in TIERS:
        raise PolicyParseError(f"{where}: 'tier' must be one of {TIERS}")
    message = raw.get("message")
    if not isinstance(message, str) or not message:
        raise PolicyParseError(f"{where}: 'message' must be a non-empty string")
    matchers_raw = raw.get("matchers")
    if not isinstance(matchers_raw, list) or not matchers_raw:
        raise PolicyParseError(f"{where}: 'matchers' must be a non-empty list")
    reversible = raw.get("reversible_hint")
    if reversible is not None and not isinstance(reversible, bool):
        raise PolicyParseError(f"{where}: 'reversible_hint' must be a boolean")
    matchers = tuple(
        _parse_matcher(m, f"{where}.matchers[{j}]") for j, m in enumerate(matchers_raw)
    )
    return PolicyRule(
        id=rule_id,
        tier=tier,
        matchers=matchers,
        message=message,
        reversible_hint=reversible,
    )


def _parse_document(document: str) -> list[PolicyRule]:
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise PolicyParseError(f"rule document is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("rules"), list):
        raise PolicyParseError("rule document must be an object with a 'rules' list")
    return [_parse_rule(raw, i) for i, raw in enumerate(data["rules"])]


def load_rules(document: str) -> RuleSet:
    """Parse a rule document into an immutable RuleSet.

    Raises PolicyParseError on malformed documents and DuplicateRuleIdError
    when two rules share an id.
    """
    rules = _parse_document(document)
    seen: set[str] = set()
    for rule in rules:
        if rule.id in seen:
            raise DuplicateRuleIdError(f"duplicate rule id: {rule.id!r}")
        seen.add(rule.id)
    return RuleSet(rules=tuple(rules))


def evaluate(command: str, rules: RuleSet) -> PolicyDecision:
    """Classify a command against a rule set.

    Total over strings: never raises. The highest-severity matching rule
    wins (deny > warn > allow); ties within a tier go to the rule that
    appears first in the document. No match yields the warn default.
    """
    best: PolicyRule | None = None
    best_severity = -1
    for rule in rules:
        if rule.matches(command):
            severity = _SEVERITY[rule.tier]
            if severity > best_severity:
                best = rule
                best_severity = severity
                if rule.tier == TIER_DENY:
                    break  # nothing outranks the first deny
    if best is None:
        return PolicyDecision(
            tier=TIER_WARN,
            rule_id=None,
            message=DEFAULT_WARN_MESSAGE,
            evaluated_command=command,
        )
    return PolicyDecision(
        tier=best.tier,
        rule_id=best.id,
        message=best.message,
        evaluated_command=command,
    )


def explain(decision: PolicyDecision) -> str:
    """User-facing sentence combining rule message and tier consequence."""
    return f"{decision.message} This command {_CONSEQUENCE[decision.tier]}."


def _matcher_covers(earlier: Matcher, later: Matcher) -> bool:
    """True when every command matched by `later` is matched by `earlier`.

    Only decidable exact/substring_all cases are claimed; anything
    involving a regex is conservatively treated as not covered.
    """
    if later.kind == "exact":
        if earlier.kind == "exact":
            if earlier.case_sensitive and not later.case_sensitive:
                return False
            if earlier.case_sensitive:
                return earlier.pattern == later.pattern
            return earlier.pattern.lower() == later.pattern.lower()
        if earlier.kind == "substring_all":
            if earlier.case_sensitive and not later.case_sensitive:
                return False
            target = later.pattern if earlier.case_sensitive else later.pattern.lower()
            needles = (
                earlier.patterns
                if earlier.case_sensitive
                else tuple(p.lower() for p in earlier.patterns)
            )
            return all(n in target for n in needles)
        return False
    if later.kind == "substring_all":
        if earlier.kind != "substring_all":
            return False
        if earlier.case_sensitive and not later.case_sensitive:
            return False
        own = (
            later.patterns
            if earlier.case_sensitive
            else tuple(p.lower() for p in later.patterns)
        )
        theirs = (
            earlier.patterns
            if earlier.case_sensitive
            else tuple(p.lower() for p in earlier.patterns)
        )
        # Every needle the earlier matcher requires must be forced by one of
        # ours appearing as a superstring, so any command we match contains it.
        return all(any(q in p for p in own) for q in theirs)
    return False


def _rule_covers(earlier: PolicyRule, matcher: Matcher) -> bool:
    return any(_matcher_covers(em, matcher) for em in earlier.matchers)


def lint(document: str) -> list[LintDiagnostic]:
    """Diagnose a rule document: parse errors, duplicate ids, shadowed rules.

    Never raises; all findings come back as diagnostics.
    """
    diagnostics: list[LintDiagnostic] = []
    try:
        rules = _parse_document(document)
    except PolicyParseError as exc:
        return [LintDiagnostic(code="parse-error", message=str(exc))]

    seen: set[str] = set()
    for rule in rules:
        if rule.id in seen:
            diagnostics.append(
                LintDiagnostic(
                    code="duplicate-id",
                    message=f"rule id {rule.id!r} appears more than once",
                    rule_id=rule.id,
                )
            )
        seen.add(rule.id)

    for i, rule in enumerate(rules):
        shadowers = [
            earlier
            for earlier in rules[:i]
            if _SEVERITY[earlier.tier] >= _SEVERITY[rule.tier]
        ]
        if not shadowers:
            continue
        if all(any(_rule_covers(e, m) for e in shadowers) for m in rule.matchers):
            culprit = next(
                e.id for e in shadowers if any(_rule_covers(e, m) for m in rule.matchers)
            )
            diagnostics.append(
                LintDiagnostic(
                    code="shadowed-rule",
                    message=(
                        f"rule {rule.id!r} can never decide a command: every pattern "
                        f"is already matched by earlier rule {culprit!r} at the same "
                        "or higher tier"
                    ),
                    rule_id=rule.id,
                )
            )
    return diagnostics


def default_rules_text() -> str:
    """Content of the packaged default rule document."""
    from importlib import resources

    return (
        resources.files("vigil").joinpath("policies/default.rules").read_text("utf-8")
    )


def load_default_rules() -> RuleSet:
    return load_rules(default_rules_text())
