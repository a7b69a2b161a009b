"""Offline evaluation: case matching, quality scoring, and reporting.

Pipeline: stored traces are digested into per-session summaries, matched
against a repository of historical support cases (embedding screen, then
verifier confirmation), scored on five quality dimensions by a judge
provider, and rolled up into an operational report. Survey scoring for
the usability instruments lives here too.

The verifier and judge are provider interfaces. The in-repo
implementations are deterministic keyword rubrics so the whole pipeline
is reproducible offline; the prompt templates for model-backed providers
ship alongside them.
"""

from __future__ import annotations

import logging
import re
import statistics
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .knowledge import SCORE_DECIMALS, CaseRecord
from .traces import TraceEvent, TraceStore

logger = logging.getLogger("vigil.evaluation")

DEFAULT_SIMILARITY_THRESHOLD = 0.55
DEFAULT_MIN_CONFIDENCE = 7
DEFAULT_GOOD_CUTOFF = 7
DEFAULT_ACTIVE_WORK_FRACTION = 0.10

RESOLUTION_CONFIDENCE_VALUES = ("high", "medium", "low", "unable")

QUALITY_DIMENSIONS = (
    "issue_understanding",
    "root_cause_accuracy",
    "response_relevance",
    "actionability",
    "completeness",
)


class EvalError(Exception):
    pass


# -- session digests -------------------------------------------------------


@dataclass(frozen=True)
class SessionDigest:
    """What the evaluation pipeline needs to know about one session."""

    session_id: str
    issue_text: str
    final_response: str
    phase: str
    cycles: int
    diagnosis_seconds: float
    tool_calls: int
    tool_successes: int

    def match_text(self) -> str:
        return f"{self.issue_text} {self.final_response}".strip()


def digest_session(events: Sequence[TraceEvent]) -> SessionDigest:
    """Reduce one session's trace to the fields evaluation cares about."""
    if not events:
        raise EvalError("empty event list")
    started = next((e for e in events if e.kind == "session_started"), None)
    ended = next((e for e in events if e.kind == "session_ended"), None)
    if started is None:
        raise EvalError(f"session {events[0].session_id!r} has no start event")
    if ended is None:
        raise EvalError(f"session {started.session_id!r} never ended")
    # diagnosis time runs from intake to the first adopted-plan proposal;
    # sessions that never plan (no-issue, escalation) run to their end
    first_plan = next((e for e in events if e.kind == "plan_proposed"), None)
    diagnosis_end = first_plan if first_plan is not None else ended
    tool_events = [e for e in events if e.kind == "tool_invoked"]
    return SessionDigest(
        session_id=started.session_id,
        issue_text=str(started.payload.get("issue_text", "")),
        final_response=str(ended.payload.get("outcome_summary", "")),
        phase=str(ended.payload.get("phase", "")),
        cycles=sum(1 for e in events if e.kind == "cycle"),
        diagnosis_seconds=diagnosis_end.timestamp - started.timestamp,
        tool_calls=len(tool_events),
        tool_successes=sum(1 for e in tool_events if e.payload.get("success")),
    )


def load_session_digests(trace_root) -> list[SessionDigest]:
    """Digest every completed session under a trace directory.

    Sessions without a session_ended event are still live and skipped.
    """
    store = TraceStore(trace_root, durable=False, strict_seq=False)
    digests = []
    for session_id in store.session_ids():
        if not store.is_ended(session_id):
            logger.info("skipping unfinished session %s", session_id)
            continue
        digests.append(digest_session(store.read(session_id)))
    return digests


# -- case matching ---------------------------------------------------------


@dataclass(frozen=True)
class VerifierAssessment:
    is_similar: bool
    confidence: int
    issue_type_match: bool
    root_cause_match: bool
    resolution_match: bool
    reasoning: str

    def __post_init__(self) -> None:
        if not 1 <= self.confidence <= 10:
            raise EvalError(f"confidence must be 1..10, got {self.confidence}")


@dataclass(frozen=True)
class MatchResult:
    session_id: str
    case_id: str
    embed_similarity: float
    verifier: VerifierAssessment | None  # None when the provider failed
    confirmed: bool


def _token_set(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9_]+", text.lower()))


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


class RubricVerifier:
    """Deterministic stand-in for a model-backed similarity verifier.

    Field matches come from token overlap between the session's text and
    the corresponding case fields. Coarse, but reproducible, which is the
    point: the pipeline around it stays testable without model access.
    """

    def __init__(self, similar_floor: float = 0.5, field_floor: float = 0.3):
        self.similar_floor = similar_floor
        self.field_floor = field_floor

    def assess(self, session: SessionDigest, case: CaseRecord) -> VerifierAssessment:
        issue = _jaccard(_token_set(session.issue_text), _token_set(case.issue_description))
        root = _jaccard(_token_set(session.final_response), _token_set(case.root_cause))
        resolution = _jaccard(
            _token_set(session.final_response),
            _token_set(case.resolution_summary + " " + " ".join(case.resolution_steps)),
        )
        blended = 0.5 * issue + 0.5 * max(root, resolution)
        confidence = min(10, max(1, 1 + round(blended * 9)))
        return VerifierAssessment(
            is_similar=blended >= self.similar_floor,
            confidence=confidence,
            issue_type_match=issue >= self.field_floor,
            root_cause_match=root >= self.field_floor,
            resolution_match=resolution >= self.field_floor,
            reasoning=(
                f"token overlap: issue {issue:.2f}, root cause {root:.2f}, "
                f"resolution {resolution:.2f}"
            ),
        )


def match_cases(
    sessions: Sequence[SessionDigest],
    case_repo: Mapping[str, CaseRecord],
    embed_provider,
    verifier_provider,
    threshold: float = DEFAULT_SIMILARITY_THRESHOLD,
    min_confidence: int = DEFAULT_MIN_CONFIDENCE,
) -> list[MatchResult]:
    """Two-step matching: embedding screen, then verifier confirmation.

    Every (session, case) pair at or above the similarity threshold goes
    to the verifier; a pair is confirmed when the verifier agrees it is
    similar with confidence >= min_confidence. A verifier failure leaves
    the pair in the results unconfirmed (verifier None) and is logged.
    """
    cases = sorted(case_repo.values(), key=lambda c: c.id)
    case_vectors = [embed_provider.embed_text(c.searchable_text()) for c in cases]
    results: list[MatchResult] = []
    for session in sessions:
        query = embed_provider.embed_text(session.match_text())
        for case, vector in zip(cases, case_vectors):
            # quantized like retrieval so boundary comparisons are stable
            similarity = round(float(query @ vector), SCORE_DECIMALS)
            if similarity < threshold:
                continue
            try:
                assessment = verifier_provider.assess(session, case)
            except Exception as exc:
                logger.warning(
                    "verifier failed on (%s, %s): %s", session.session_id, case.id, exc
                )
                results.append(
                    MatchResult(session.session_id, case.id, similarity, None, False)
                )
                continue
            confirmed = (
                assessment.is_similar and assessment.confidence >= min_confidence
            )
            results.append(
                MatchResult(
                    session.session_id, case.id, similarity, assessment, confirmed
                )
            )
    results.sort(key=lambda r: (r.session_id, -r.embed_similarity, r.case_id))
    return results


# -- quality scoring -------------------------------------------------------


@dataclass(frozen=True)
class QualityScore:
    issue_understanding: int
    root_cause_accuracy: int
    response_relevance: int
    actionability: int
    completeness: int
    overall: int
    resolution_confidence: str

    def __post_init__(self) -> None:
        for dim in QUALITY_DIMENSIONS + ("overall",):
            value = getattr(self, dim)
            if not isinstance(value, int) or not 1 <= value <= 10:
                raise EvalError(f"{dim} must be an integer in 1..10, got {value!r}")
        if self.resolution_confidence not in RESOLUTION_CONFIDENCE_VALUES:
            raise EvalError(
                f"resolution_confidence must be one of "
                f"{RESOLUTION_CONFIDENCE_VALUES}, got {self.resolution_confidence!r}"
            )


# dimension order matches QUALITY_DIMENSIONS
_JUDGE_DIMS = {
    "high": (9, 9, 9, 9, 9),
    "medium": (8, 7, 8, 8, 7),
    "low": (7, 5, 7, 6, 5),
}


class RubricJudge:
    """Deterministic keyword/length judge for the quality pipeline.

    Buckets the session by outcome, then assigns a fixed dimension
    profile, with a ceiling bonus for thorough step-by-step summaries.
    A stub by design; real deployments swap in a model-backed provider
    using the shipped prompt template.
    """

    def score(self, session: SessionDigest) -> QualityScore:
        response = session.final_response.strip()
        if not response:
            return QualityScore(1, 1, 1, 1, 1, overall=1, resolution_confidence="unable")
        tokens = _token_set(response)
        verified = "verified" in tokens or "confirmed" in tokens
        if session.phase == "resolved" and verified:
            bucket = "high"
        elif session.phase == "no_issue" and "normal" in tokens:
            bucket = "high"
        elif session.phase in ("resolved", "no_issue"):
            bucket = "medium"
        else:
            bucket = "low"
        dims = _JUDGE_DIMS[bucket]
        stepped = bool(re.search(r"(?m)^\s*\d+[.)]", response))
        if bucket == "high" and stepped and len(tokens) >= 40:
            dims = (10, 10, 10, 10, 10)
        overall = min(10, max(1, round(statistics.fmean(dims))))
        return QualityScore(*dims, overall=overall, resolution_confidence=bucket)


def score_quality(session: SessionDigest, judge_provider) -> QualityScore:
    """Score one terminal session, validating the provider's output."""
    score = judge_provider.score(session)
    if not isinstance(score, QualityScore):
        raise EvalError(
            f"judge returned {type(score).__name__}, expected QualityScore"
        )
    return score


def score_sessions(
    sessions: Sequence[SessionDigest], judge_provider
) -> tuple[dict[str, QualityScore], list[str]]:
    """Score a batch; sessions whose scoring fails are excluded and logged."""
    scores: dict[str, QualityScore] = {}
    excluded: list[str] = []
    for session in sessions:
        try:
            scores[session.session_id] = score_quality(session, judge_provider)
        except Exception as exc:
            logger.warning("judge failed on %s: %s", session.session_id, exc)
            excluded.append(session.session_id)
    return scores, excluded


# -- operational report ----------------------------------------------------


@dataclass(frozen=True)
class OperationalReport:
    sessions_total: int
    matched_sessions: int
    match_rate: float | None
    median_cycles: float | None
    median_human_turns: float | None
    round_reduction_fraction: float | None
    reduction_case_fraction: float | None
    median_diagnosis_seconds: float | None
    median_contact_minutes: float | None
    speedup_lower_bound: float | None
    median_overall_quality: float | None
    good_or_excellent_fraction: float | None
    confidence_fractions: dict[str, float]
    self_service_fraction: float | None
    tool_success_rate: float | None
    active_work_fraction: float
    good_cutoff: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "sessions_total": self.sessions_total,
            "matched_sessions": self.matched_sessions,
            "match_rate": self.match_rate,
            "median_cycles": self.median_cycles,
            "median_human_turns": self.median_human_turns,
            "round_reduction_fraction": self.round_reduction_fraction,
            "reduction_case_fraction": self.reduction_case_fraction,
            "median_diagnosis_seconds": self.median_diagnosis_seconds,
            "median_contact_minutes": self.median_contact_minutes,
            "speedup_lower_bound": self.speedup_lower_bound,
            "median_overall_quality": self.median_overall_quality,
            "good_or_excellent_fraction": self.good_or_excellent_fraction,
            "confidence_fractions": self.confidence_fractions,
            "self_service_fraction": self.self_service_fraction,
            "tool_success_rate": self.tool_success_rate,
            "active_work_fraction": self.active_work_fraction,
            "good_cutoff": self.good_cutoff,
        }

    def to_text(self) -> str:
        def pct(value: float | None) -> str:
            return "n/a" if value is None else f"{value * 100:.1f}%"

        def num(value: float | None, suffix: str = "") -> str:
            return "n/a" if value is None else f"{value:g}{suffix}"

        lines = [
            "Operational report",
            "==================",
            f"Sessions analyzed: {self.sessions_total}",
            f"Matched to historical cases: {self.matched_sessions} ({pct(self.match_rate)})",
            f"Median reasoning cycles (matched): {num(self.median_cycles)}",
            f"Median human turns (matched cases): {num(self.median_human_turns)}",
            f"Interaction round reduction: {pct(self.round_reduction_fraction)}"
            f" (seen in {pct(self.reduction_case_fraction)} of matched pairs)",
            f"Median diagnosis time: {num(self.median_diagnosis_seconds, ' s')}",
            f"Median historical contact duration: {num(self.median_contact_minutes, ' min')}",
            f"Diagnosis speedup lower bound: {num(self.speedup_lower_bound, 'x')}",
            f"Median overall quality: {num(self.median_overall_quality)} / 10",
            f"Good or Excellent (overall >= {self.good_cutoff}): "
            f"{pct(self.good_or_excellent_fraction)}",
            "Resolution confidence: "
            + ", ".join(
                f"{name} {pct(self.confidence_fractions.get(name))}"
                for name in RESOLUTION_CONFIDENCE_VALUES
            ),
            f"Self-service potential (high + medium): {pct(self.self_service_fraction)}",
            f"Tool success rate: {pct(self.tool_success_rate)}",
            "",
            "Notes:",
            "- Turn comparisons use each session's best-similarity confirmed case.",
            f"- Speedup assumes {self.active_work_fraction * 100:g}% of contact "
            "time is active diagnostic work.",
        ]
        return "\n".join(lines)


def _median(values: Sequence[float]) -> float:
    # sort-and-middle; even counts average the middle two
    return float(statistics.median(values))


def compute_report(
    sessions: Sequence[SessionDigest],
    matches: Sequence[MatchResult],
    scores: Mapping[str, QualityScore],
    case_repo: Mapping[str, CaseRecord],
    active_work_fraction: float = DEFAULT_ACTIVE_WORK_FRACTION,
    good_cutoff: int = DEFAULT_GOOD_CUTOFF,
) -> OperationalReport:
    """Aggregate matching, quality, and tool outcomes into one report.

    Matched-pair comparisons take the best-similarity confirmed case per
    session. With zero matched sessions the matched-dependent fields are
    None and the report is still produced.
    """
    if not 0 < active_work_fraction <= 1:
        raise EvalError(
            f"active_work_fraction must be in (0, 1], got {active_work_fraction}"
        )

    # best confirmed case per session; matches are pre-sorted by similarity
    # but do not rely on that here
    best: dict[str, MatchResult] = {}
    for match in matches:
        if not match.confirmed:
            continue
        current = best.get(match.session_id)
        if current is None or match.embed_similarity > current.embed_similarity:
            best[match.session_id] = match

    sessions_total = len(sessions)
    matched = [s for s in sessions if s.session_id in best]
    match_rate = len(matched) / sessions_total if sessions_total else None

    median_cycles = median_turns = reduction = reduced_fraction = None
    median_diagnosis = median_contact = speedup = None
    if matched:
        pairs = [(s, case_repo[best[s.session_id].case_id]) for s in matched]
        median_cycles = _median([s.cycles for s, _ in pairs])
        median_turns = _median([c.turn_count for _, c in pairs])
        if median_turns:
            reduction = (median_turns - median_cycles) / median_turns
        reduced_fraction = sum(
            1 for s, c in pairs if s.cycles < c.turn_count
        ) / len(pairs)
        median_diagnosis = _median([s.diagnosis_seconds for s, _ in pairs])
        median_contact = _median([c.contact_duration_minutes for _, c in pairs])
        if median_diagnosis:
            speedup = (active_work_fraction * median_contact * 60) / median_diagnosis

    overall_values = [score.overall for score in scores.values()]
    median_overall = _median(overall_values) if overall_values else None
    good_fraction = (
        sum(1 for v in overall_values if v >= good_cutoff) / len(overall_values)
        if overall_values
        else None
    )
    confidence_fractions: dict[str, float] = {}
    self_service = None
    if scores:
        buckets = [score.resolution_confidence for score in scores.values()]
        confidence_fractions = {
            name: buckets.count(name) / len(buckets)
            for name in RESOLUTION_CONFIDENCE_VALUES
        }
        self_service = confidence_fractions["high"] + confidence_fractions["medium"]

    total_calls = sum(s.tool_calls for s in sessions)
    total_successes = sum(s.tool_successes for s in sessions)
    tool_rate = total_successes / total_calls if total_calls else None

    return OperationalReport(
        sessions_total=sessions_total,
        matched_sessions=len(matched),
        match_rate=match_rate,
        median_cycles=median_cycles,
        median_human_turns=median_turns,
        round_reduction_fraction=reduction,
        reduction_case_fraction=reduced_fraction,
        median_diagnosis_seconds=median_diagnosis,
        median_contact_minutes=median_contact,
        speedup_lower_bound=speedup,
        median_overall_quality=median_overall,
        good_or_excellent_fraction=good_fraction,
        confidence_fractions=confidence_fractions,
        self_service_fraction=self_service,
        tool_success_rate=tool_rate,
        active_work_fraction=active_work_fraction,
        good_cutoff=good_cutoff,
    )


# -- survey scoring --------------------------------------------------------


@dataclass(frozen=True)
class SurveyResponse:
    sus_items: tuple[int, ...]  # 10 items, 1..5
    tlx_items: tuple[float, ...]  # 6 items, 1..7; performance is item 4
    trust_items: tuple[float, ...]  # 1..5, already oriented (higher = more trust)
    tam_items: tuple[float, ...]  # 1..5, already oriented


# NASA-TLX administers performance on a good-to-poor scale; on the 1..7
# form used here a high raw rating means good performance, so it is
# flipped before averaging into a workload score.
TLX_PERFORMANCE_INDEX = 3  # 0-based position of the performance item


def sus_score(items: Sequence[int]) -> float:
    """Composite 0..100 usability score for one 10-item response."""
    odd = sum(items[i] - 1 for i in range(0, 10, 2))
    even = sum(5 - items[i] for i in range(1, 10, 2))
    return (odd + even) * 2.5


@dataclass(frozen=True)
class SurveyReport:
    n_responses: int
    sus_mean: float
    sus_sd: float | None
    tlx_mean: float
    trust_mean: float | None
    tam_mean: float | None
    per_item_means: dict[str, list[float]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_responses": self.n_responses,
            "sus_mean": self.sus_mean,
            "sus_sd": self.sus_sd,
            "tlx_mean": self.tlx_mean,
            "trust_mean": self.trust_mean,
            "tam_mean": self.tam_mean,
            "per_item_means": self.per_item_means,
        }


def _check_items(
    response_index: int,
    name: str,
    items: Sequence[float],
    low: float,
    high: float,
    count: int | None = None,
) -> None:
    if count is not None and len(items) != count:
        raise EvalError(
            f"response {response_index}: {name} needs {count} items, got {len(items)}"
        )
    for i, value in enumerate(items):
        if not low <= value <= high:
            raise EvalError(
                f"response {response_index}: {name} item {i + 1} out of range "
                f"[{low}, {high}]: {value}"
            )


def score_survey(responses: Sequence[SurveyResponse]) -> SurveyReport:
    """Score the four instruments across all responses.

    SUS uses the standard alternating-item formula; TLX flips the
    performance item before averaging; trust and acceptance items are
    taken as provided. Per-item means are over raw (unflipped) values.
    """
    if not responses:
        raise EvalError("no survey responses")
    for idx, r in enumerate(responses):
        _check_items(idx, "sus", r.sus_items, 1, 5, count=10)
        _check_items(idx, "tlx", r.tlx_items, 1, 7, count=6)
        _check_items(idx, "trust", r.trust_items, 1, 5)
        _check_items(idx, "tam", r.tam_items, 1, 5)
        for name in ("trust_items", "tam_items"):
            if len(getattr(r, name)) != len(getattr(responses[0], name)):
                raise EvalError(
                    f"response {idx}: {name} length differs from response 0"
                )

    sus_values = [sus_score(r.sus_items) for r in responses]
    tlx_values = [
        statistics.fmean(
            8 - v if i == TLX_PERFORMANCE_INDEX else v
            for i, v in enumerate(r.tlx_items)
        )
        for r in responses
    ]
    trust_values = [v for r in responses for v in r.trust_items]
    tam_values = [v for r in responses for v in r.tam_items]

    def item_means(rows: list[Sequence[float]]) -> list[float]:
        return [statistics.fmean(column) for column in zip(*rows)] if rows[0] else []

    return SurveyReport(
        n_responses=len(responses),
        sus_mean=statistics.fmean(sus_values),
        sus_sd=statistics.stdev(sus_values) if len(sus_values) > 1 else None,
        tlx_mean=statistics.fmean(tlx_values),
        trust_mean=statistics.fmean(trust_values) if trust_values else None,
        tam_mean=statistics.fmean(tam_values) if tam_values else None,
        per_item_means={
            "sus": item_means([r.sus_items for r in responses]),
            "tlx": item_means([r.tlx_items for r in responses]),
            "trust": item_means([r.trust_items for r in responses]),
            "tam": item_means([r.tam_items for r in responses]),
        },
    )


# -- prompt templates for model-backed providers ----------------------------

# Placeholders are {name} tokens substituted by render_prompt; the texts
# themselves are the operational prompts used when a model provider
# replaces the rubric stubs.

PROMPT_QUALITY_EVAL = """\
==========================
EVALUATION PROMPT A: RESPONSE QUALITY
==========================

You are an expert IT support quality evaluator. Evaluate the following
automated IT assistant (VIGIL) response.

>> User Issue
{user_input}

>> VIGIL's Diagnostic Process
Tools used: {tools_used}
Total cycles: {total_cycles}
Duration: {duration} seconds

Execution trace:
{trace_summary}

>> VIGIL's Final Response
{response}

---

>> Evaluation Criteria

Please evaluate the response on the following criteria (1-10 scale,
where 10 is excellent):

1. Issue Understanding: Did VIGIL correctly understand what the user
   was asking about?
2. Root Cause Accuracy: Did VIGIL identify the correct root cause or
   relevant factors?
3. Response Relevance: Is the response directly relevant to the user's
   issue?
4. Actionability: Are the suggested steps clear, specific, and
   actionable?
5. Completeness: Does the response address all aspects of the issue?

Also assess:
6. Resolution Confidence: How confident are you that following VIGIL's
   guidance would resolve the issue?
   - "high": Very likely to resolve
   - "medium": Likely to help but may need follow-up
   - "low": Unlikely to fully resolve
   - "unable": VIGIL could not provide a resolution

Output: JSON with scores and assessment.
"""

PROMPT_CASE_MATCH = """\
==========================
EVALUATION PROMPT B: CASE SIMILARITY MATCHING
==========================

You are an IT support case analyst. Compare the following two IT
support cases and determine if they are similar in terms of:
1. Issue type (the fundamental problem being addressed)
2. Root cause (the underlying cause of the issue)
3. Resolution actions (the steps taken to resolve, if available)

>> VIGIL Case (Automated IT Assistant)

User Issue:
{user_input}

Final Response:
{response}

>> CGR Case (Human Agent IT Support)

Issue Description:
{issue_description}

Chat Transcript (excerpt):
{chat_transcript}

Resolution Summary:
{resolution_Summary}

Root Cause:
{resolution_RootCause}

Resolution Steps:
{resolution_ResolutionAgent}

>> Your Task

Analyze both cases and provide your assessment in the following JSON
format:
{
    "is_similar": true/false,
    "confidence": 1-10,
    "issue_type_match": true/false,
    "root_cause_match": true/false,
    "resolution_match": true/false,
    "reasoning": "Brief explanation of your assessment"
}
"""


def render_prompt(template: str, values: Mapping[str, Any]) -> str:
    """Fill {name} placeholders without disturbing literal braces.

    str.format would choke on the JSON skeleton in the templates, so only
    the provided keys are substituted.
    """
    rendered = template
    for key, value in values.items():
        rendered = rendered.replace("{" + key + "}", str(value))
    return rendered
