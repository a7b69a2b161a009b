"""Operator entry points.

Subcommands: run a scenario to completion, serve the endpoint API plus
console assets, serve the fleet aggregator, evaluate stored traces
against a case repository, lint a policy file, and replay a stored trace
as JSON lines.

Configuration precedence, highest first: command-line flags, VIGIL_*
environment variables, a JSON config file, built-in defaults. Every file
a setting points at is checked up front so a typo fails with the path in
the message instead of half-starting the service.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .evaluation import (
    DEFAULT_ACTIVE_WORK_FRACTION,
    DEFAULT_GOOD_CUTOFF,
    DEFAULT_MIN_CONFIDENCE,
    DEFAULT_SIMILARITY_THRESHOLD,
    EvalError,
    RubricJudge,
    RubricVerifier,
    compute_report,
    load_session_digests,
    match_cases,
    score_sessions,
)
from .fleet import FleetService, create_fleet_app
from .knowledge import HashEmbeddingProvider, load_case_repo
from .policy import PolicyError, RuleSet, lint, load_default_rules, load_rules
from .scenario import ScenarioError, load_scenario, replay
from .server import EndpointRuntime, create_endpoint_app
from .traces import TraceError, TraceStore

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ESCALATED = 2

DEFAULT_DATA_DIR = "vigil-data"
DEFAULT_ENDPOINT_PORT = 8420
DEFAULT_FLEET_PORT = 8430


class CliError(Exception):
    pass


@dataclass
class AppConfig:
    data_dir: Path
    policy_path: Path | None = None
    fleet_url: str | None = None

    def load_rules(self) -> RuleSet:
        if self.policy_path is None:
            return load_default_rules()
        return load_rules(self.policy_path.read_text("utf-8"))


def resolve_config(args: argparse.Namespace, env=None) -> AppConfig:
    """Merge flags, VIGIL_* environment, config file, and defaults."""
    env = os.environ if env is None else env

    file_values: dict = {}
    config_path = getattr(args, "config", None) or env.get("VIGIL_CONFIG")
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise CliError(f"{path}: config must be a JSON object")

    def pick(flag_name: str, env_key: str, file_key: str, default=None):
        flag = getattr(args, flag_name, None)
        if flag is not None:
            return flag
        if env_key in env:
            return env[env_key]
        if file_key in file_values:
            return file_values[file_key]
        return default

    data_dir = Path(pick("data_dir", "VIGIL_DATA_DIR", "data_dir", DEFAULT_DATA_DIR))
    policy = pick("policy", "VIGIL_POLICY", "policy")
    fleet_url = pick("fleet_url", "VIGIL_FLEET_URL", "fleet_url")

    policy_path = Path(policy) if policy else None
    if policy_path is not None and not policy_path.is_file():
        raise CliError(f"policy file not found: {policy_path}")
    return AppConfig(data_dir=data_dir, policy_path=policy_path, fleet_url=fleet_url)


# -- argparse value checks ----------------------------------------------------


def _unit_interval(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be between 0 and 1, got {text}")
    return value


def _positive_fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return value


def _positive_seconds(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if value <= 0.0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _score_1_to_10(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 1 <= value <= 10:
        raise argparse.ArgumentTypeError(f"must be between 1 and 10, got {text}")
    return value


# -- subcommands ---------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    scenario = load_scenario(args.scenario)
    result = replay(scenario, config.data_dir / "traces", rules=config.load_rules())
    print(result.summary)
    phase = result.session.phase
    if phase in ("resolved", "no_issue"):
        return EXIT_OK
    if phase == "escalated":
        return EXIT_ESCALATED
    return EXIT_ERROR


def _default_console_dir() -> Path | None:
    # editable installs run from the repo, where the console build lives
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = resolve_config(args)
    scenario = load_scenario(args.scenario) if args.scenario else None
    console_dir = Path(args.console_dir) if args.console_dir else _default_console_dir()
    if args.console_dir and not Path(args.console_dir).is_dir():
        raise CliError(f"console directory not found: {args.console_dir}")
    runtime = EndpointRuntime(
        config.data_dir,
        rules=config.load_rules(),
        scenario=scenario,
        endpoint_id=args.endpoint_id,
        fleet_url=config.fleet_url,
        sync_interval=args.sync_interval,
    )
    app = create_endpoint_app(runtime, console_dir=console_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return EXIT_OK


def cmd_fleet_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = resolve_config(args)
    service = FleetService(config.data_dir / "fleet")
    app = create_fleet_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    traces_dir = Path(args.traces)
    cases_path = Path(args.cases)
    if not cases_path.is_file():
        raise CliError(f"case repository not found: {cases_path}")

    sessions = load_session_digests(traces_dir)
    cases = load_case_repo(cases_path)
    matches = match_cases(
        sessions,
        cases,
        HashEmbeddingProvider(),
        RubricVerifier(),
        threshold=args.threshold,
        min_confidence=args.min_confidence,
    )
    scores, excluded = score_sessions(sessions, RubricJudge())
    report = compute_report(
        sessions,
        matches,
        scores,
        cases,
        active_work_fraction=args.active_work_fraction,
        good_cutoff=args.good_cutoff,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(report.to_text())
    if excluded:
        print(
            f"note: {len(excluded)} session(s) could not be scored: "
            + ", ".join(sorted(excluded)),
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_policy_lint(args: argparse.Namespace) -> int:
    path = Path(args.policy_file)
    if not path.is_file():
        raise CliError(f"policy file not found: {path}")
    diagnostics = lint(path.read_text("utf-8"))
    for diag in diagnostics:
        where = f" [{diag.rule_id}]" if diag.rule_id else ""
        print(f"{diag.code}{where}: {diag.message}")
    if diagnostics:
        return EXIT_ERROR
    print(f"{path}: no issues found")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    store = TraceStore(config.data_dir / "traces", durable=False)
    if args.session_id not in store.session_ids():
        raise CliError(f"unknown session: {args.session_id}")
    for event in store.read(args.session_id):
        print(event.to_json())
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vigil",
        description="Edge IT-support agent: run, serve, aggregate, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data-dir", dest="data_dir", help="trace/state directory")
        p.add_argument("--policy", help="policy rules file (default: built-in)")
        p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("run", help="replay a scenario to completion")
    p.add_argument("scenario", help="scenario JSON file")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="serve the endpoint API and console")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_ENDPOINT_PORT)
    p.add_argument("--scenario", help="scenario file backing new sessions")
    p.add_argument("--endpoint-id", dest="endpoint_id", default="endpoint")
    p.add_argument("--fleet-url", dest="fleet_url", help="fleet service base URL")
    p.add_argument(
        "--sync-interval",
        dest="sync_interval",
        type=_positive_seconds,
        default=5.0,
        help="seconds between trace pushes to the fleet",
    )
    p.add_argument("--console-dir", dest="console_dir", help="console asset build")
    p.add_argument("--log-level", dest="log_level", default="info")
    common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("fleet-serve", help="serve the fleet aggregation API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_FLEET_PORT)
    p.add_argument("--log-level", dest="log_level", default="info")
    common(p)
    p.set_defaults(func=cmd_fleet_serve)

    p = sub.add_parser("eval", help="evaluate stored traces against a case repo")
    p.add_argument("traces", help="trace directory")
    p.add_argument("cases", help="case repository JSONL file")
    p.add_argument("--out-dir", dest="out_dir", default="eval-report")
    p.add_argument(
        "--threshold",
        type=_unit_interval,
        default=DEFAULT_SIMILARITY_THRESHOLD,
        help="embedding similarity screen (0..1)",
    )
    p.add_argument(
        "--min-confidence",
        dest="min_confidence",
        type=_score_1_to_10,
        default=DEFAULT_MIN_CONFIDENCE,
        help="verifier confidence needed to confirm a match (1..10)",
    )
    p.add_argument(
        "--active-work-fraction",
        dest="active_work_fraction",
        type=_positive_fraction,
        default=DEFAULT_ACTIVE_WORK_FRACTION,
        help="assumed active fraction of human contact time (0..1]",
    )
    p.add_argument(
        "--good-cutoff",
        dest="good_cutoff",
        type=_score_1_to_10,
        default=DEFAULT_GOOD_CUTOFF,
        help="overall score counted as good-or-excellent (1..10)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("policy-lint", help="diagnose a policy rules file")
    p.add_argument("policy_file")
    p.set_defaults(func=cmd_policy_lint)

    p = sub.add_parser("replay", help="print a stored trace as JSON lines")
    p.add_argument("session_id")
    common(p)
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ScenarioError, PolicyError, TraceError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # contract: internal errors exit 1, not a traceback
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
