"""Simulated host: deterministic machine state plus scripted shell outcomes.

The simulation carries just enough state for the diagnostic tools (uptime,
pending updates, processes, mounts, network flags, free-form settings) and
a command table mapping shell strings to scripted results. Side effects
are declarative set-operations applied only when the scripted command
succeeds, so replays are reproducible and the state after any prefix of a
scenario is a pure function of the script.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Iterable


class HostError(Exception):
    pass


class UnscriptedCommandError(HostError):
    """Raised in strict mode when a command has no scripted outcome."""


@dataclass
class Process:
    name: str
    cpu_percent: float
    memory_mb: float = 0.0

    def __post_init__(self) -> None:
        if self.cpu_percent < 0:
            raise ValueError(f"cpu_percent must be >= 0, got {self.cpu_percent}")
        if self.memory_mb < 0:
            raise ValueError(f"memory_mb must be >= 0, got {self.memory_mb}")


@dataclass
class Mount:
    path: str
    used_percent: float

    def __post_init__(self) -> None:
        if not 0 <= self.used_percent <= 100:
            raise ValueError(f"used_percent must be in [0, 100], got {self.used_percent}")


@dataclass
class NetworkInfo:
    link_up: bool = True
    dns_ok: bool = True


@dataclass
class ScriptedCommand:
    """One row of the command table."""

    success: bool = True
    stdout: str = ""
    error: str | None = None
    side_effects: tuple[dict[str, Any], ...] = ()
    duration_ms: float = 50.0
    exit_status: int | None = None

    def __post_init__(self) -> None:
        if self.exit_status is None:
            self.exit_status = 0 if self.success else 1
        if not self.success and self.error is None:
            self.error = "command failed"


@dataclass
class ShellResult:
    command: str
    success: bool
    stdout: str
    error: str | None
    exit_status: int
    duration_ms: float


@dataclass
class HostState:
    uptime_seconds: float = 3600.0
    pending_security_updates: int = 0
    processes: list[Process] = field(default_factory=list)
    mounts: list[Mount] = field(default_factory=list)
    network: NetworkInfo = field(default_factory=NetworkInfo)
    settings: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.uptime_seconds < 0:
            raise ValueError("uptime_seconds must be >= 0")
        if self.pending_security_updates < 0:
            raise ValueError("pending_security_updates must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "uptime_seconds": self.uptime_seconds,
            "pending_security_updates": self.pending_security_updates,
            "processes": [
                {"name": p.name, "cpu_percent": p.cpu_percent, "memory_mb": p.memory_mb}
                for p in self.processes
            ],
            "mounts": [
                {"path": m.path, "used_percent": m.used_percent} for m in self.mounts
            ],
            "network": {"link_up": self.network.link_up, "dns_ok": self.network.dns_ok},
            "settings": dict(self.settings),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "HostState":
        return cls(
            uptime_seconds=float(raw.get("uptime_seconds", 3600.0)),
            pending_security_updates=int(raw.get("pending_security_updates", 0)),
            processes=[Process(**p) for p in raw.get("processes", [])],
            mounts=[Mount(**m) for m in raw.get("mounts", [])],
            network=NetworkInfo(**raw.get("network", {})),
            settings=dict(raw.get("settings", {})),
        )


def _parse_scripted(raw: dict[str, Any]) -> ScriptedCommand:
    return ScriptedCommand(
        success=bool(raw.get("success", True)),
        stdout=str(raw.get("stdout", "")),
        error=raw.get("error"),
        side_effects=tuple(raw.get("side_effects", ())),
        duration_ms=float(raw.get("duration_ms", 50.0)),
        exit_status=raw.get("exit_status"),
    )


class SimulatedHost:
    """In-memory host the agent diagnoses and remediates.

    Tools read the state; run_shell consults the command table. In the
    default lenient mode an unscripted command succeeds as a no-op, which
    keeps hand-written scenarios short; strict mode turns that into an
    error so a scenario can prove it scripted everything it runs.
    """

    def __init__(
        self,
        state: HostState | None = None,
        commands: dict[str, ScriptedCommand] | None = None,
        strict: bool = False,
    ) -> None:
        self.state = state if state is not None else HostState()
        self.commands = dict(commands or {})
        self.strict = strict
        self.read_only = False

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SimulatedHost":
        commands = {
            cmd: _parse_scripted(spec)
            for cmd, spec in raw.get("commands", {}).items()
        }
        return cls(
            state=HostState.from_dict(raw.get("state", {})),
            commands=commands,
            strict=bool(raw.get("strict", False)),
        )

    def clone(self) -> "SimulatedHost":
        other = SimulatedHost(
            state=copy.deepcopy(self.state),
            commands=copy.deepcopy(self.commands),
            strict=self.strict,
        )
        return other

    def snapshot(self) -> str:
        """Canonical JSON of the state, for byte-equal comparisons."""
        return json.dumps(self.state.to_dict(), sort_keys=True)

    def script(self, command: str, outcome: ScriptedCommand) -> None:
        self.commands[command] = outcome

    def execute(self, command: str) -> ShellResult:
        """Run a scripted command, applying its side effects on success."""
        scripted = self.commands.get(command)
        if scripted is None:
            if self.strict:
                raise UnscriptedCommandError(f"no scripted outcome for {command!r}")
            scripted = ScriptedCommand(success=True, stdout="", duration_ms=10.0)
        if scripted.success:
            for effect in scripted.side_effects:
                self._apply_effect(effect)
        return ShellResult(
            command=command,
            success=scripted.success,
            stdout=scripted.stdout,
            error=scripted.error,
            exit_status=scripted.exit_status if scripted.exit_status is not None else 0,
            duration_ms=scripted.duration_ms,
        )

    def _apply_effect(self, effect: dict[str, Any]) -> None:
        op = effect.get("op")
        if op == "set":
            self._apply_set(effect["path"], effect["value"])
        elif op == "set_process_cpu":
            proc = self._find_process(effect["name"])
            proc.cpu_percent = float(effect["value"])
        elif op == "remove_process":
            name = effect["name"]
            before = len(self.state.processes)
            self.state.processes = [p for p in self.state.processes if p.name != name]
            if len(self.state.processes) == before:
                raise HostError(f"remove_process: no process named {name!r}")
        elif op == "add_process":
            self.state.processes.append(
                Process(
                    name=effect["name"],
                    cpu_percent=float(effect.get("cpu_percent", 0.0)),
                    memory_mb=float(effect.get("memory_mb", 0.0)),
                )
            )
        elif op == "set_mount_used":
            mount = self._find_mount(effect["path"])
            mount.used_percent = float(effect["value"])
        else:
            raise HostError(f"unknown side effect op: {op!r}")

    def _apply_set(self, path: str, value: Any) -> None:
        if path == "uptime_seconds":
            self.state.uptime_seconds = float(value)
        elif path == "pending_security_updates":
            self.state.pending_security_updates = int(value)
        elif path == "network.link_up":
            self.state.network.link_up = bool(value)
        elif path == "network.dns_ok":
            self.state.network.dns_ok = bool(value)
        elif path.startswith("settings."):
            self.state.settings[path[len("settings."):]] = value
        else:
            raise HostError(f"unknown state path: {path!r}")

    def _find_process(self, name: str) -> Process:
        for p in self.state.processes:
            if p.name == name:
                return p
        raise HostError(f"no process named {name!r}")

    def _find_mount(self, path: str) -> Mount:
        for m in self.state.mounts:
            if m.path == path:
                return m
        raise HostError(f"no mount at {path!r}")


class RealHostAdapter:
    """Placeholder seam for running against an actual machine.

    Every entry point raises: the runtime ships simulation-only and the
    seam exists so callers depend on an interface, not on SimulatedHost.
    """

    def snapshot(self) -> str:
        raise NotImplementedError("real host access is not implemented")

    def execute(self, command: str) -> ShellResult:
        raise NotImplementedError("real host access is not implemented")


def hosts_equal(a: SimulatedHost, b: SimulatedHost) -> bool:
    return a.snapshot() == b.snapshot()


def iter_state_paths(state: HostState) -> Iterable[str]:
    """Settable paths, mainly for lint/debug output."""
    yield "uptime_seconds"
    yield "pending_security_updates"
    yield "network.link_up"
    yield "network.dns_ok"
    for key in state.settings:
        yield f"settings.{key}"
