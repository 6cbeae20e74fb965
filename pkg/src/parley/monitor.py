"""Per-endpoint conversation monitors.

A monitor owns one FSM-backed session per (conversation id, role) pair. Each
checked message either advances exactly one thread cursor or produces a
violation verdict and leaves the session untouched; payload bindings
accumulate across the whole session so later assertions can refer to earlier
fields.

Assertions are delegated to a pluggable logic engine. The builtin engine
evaluates the pyexpr-like subset in-process; ExternalCommandEngine shells out
to any program speaking a one-line true/false/error protocol on stdio, so
other predicate languages can be plugged in without touching the monitor.
"""

from __future__ import annotations

import json
import os
import subprocess
from base64 import b64encode
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from . import fsm as fsmmod
from .predicates import CompiledPredicate, EvalError, compile_predicate
from .predicates import PredicateSyntaxError
from .protocol import Assertion, LocalProtocol

MODE_ENV_VAR = "MPST_MONITOR_MODE"
ENFORCE = "enforce"
SUPPRESS = "suppress"

ACTIVE = "active"
COMPLETED = "completed"
VIOLATED = "violated"
UNKNOWN = "unknown"

# Violation kinds.
UNKNOWN_SESSION = "unknown-session"
UNEXPECTED_LABEL = "unexpected-label"
WRONG_PEER = "wrong-peer"
ASSERTION_FAILED = "assertion-failed"
PAYLOAD_ARITY = "payload-arity"
AFTER_COMPLETION = "after-completion"


class MonitorError(Exception):
    pass


class UnresolvableProtocol(MonitorError):
    """The invitation's protocol reference cannot be turned into an FSM."""


class ConflictingInvitation(MonitorError):
    """A second invitation names a different protocol for an existing session."""


@dataclass(frozen=True)
class MonitorVerdict:
    ok: bool
    kind: Optional[str] = None
    detail: str = ""


ACCEPT = MonitorVerdict(True)


@dataclass
class SessionState:
    protocol_ref: str
    fsm: fsmmod.NestedFsm
    cursors: List[int]
    env: Dict[str, object] = field(default_factory=dict)
    status: str = ACTIVE
    activated: set = field(default_factory=set)


@dataclass(frozen=True)
class TraceEntry:
    cid: str
    role: str
    direction: str  # "outgoing" when the monitored role sent the message
    label: str
    sender: str
    receiver: str
    ok: bool
    kind: Optional[str]


class LogicEngine:
    """Evaluates one assertion under an environment.

    Returns True, False, or an EvalError value; implementations must not
    raise for evaluation-time problems.
    """

    def eval(self, assertion: Assertion, env: Dict[str, object]):
        raise NotImplementedError


class BuiltinLogicEngine(LogicEngine):
    """In-process evaluator for the pyexpr-like assertion language."""

    def __init__(self):
        self._cache: Dict[str, CompiledPredicate] = {}

    def eval(self, assertion: Assertion, env: Dict[str, object]):
        pred = self._cache.get(assertion.source_text)
        if pred is None:
            try:
                pred = compile_predicate(assertion.source_text)
            except PredicateSyntaxError as exc:
                return EvalError(str(exc))
            self._cache[assertion.source_text] = pred
        return pred.eval(env)


class ExternalCommandEngine(LogicEngine):
    """Runs a subprocess per evaluation.

    The command receives a JSON object {"assertion": ..., "env": {...}} on
    stdin (data values base64-encoded under {"__b64__": ...}) and must print
    one line: ``true``, ``false``, or ``error:<detail>``. Anything else,
    including a bad exit or a timeout, becomes an EvalError.
    """

    def __init__(self, argv: List[str], timeout: float = 10.0):
        self.argv = list(argv)
        self.timeout = timeout

    def eval(self, assertion: Assertion, env: Dict[str, object]):
        payload = {
            "assertion": assertion.source_text,
            "env": {name: _jsonable(value) for name, value in env.items()},
        }
        try:
            proc = subprocess.run(
                self.argv,
                input=json.dumps(payload).encode("utf-8"),
                capture_output=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            return EvalError(f"engine command failed: {exc}")
        if proc.returncode != 0:
            return EvalError(f"engine exited with {proc.returncode}")
        reply = proc.stdout.decode("utf-8", "replace").strip().splitlines()
        line = reply[0].strip() if reply else ""
        if line == "true":
            return True
        if line == "false":
            return False
        if line.startswith("error:"):
            return EvalError(line[len("error:"):].strip())
        return EvalError(f"engine reply not understood: {line!r}")


def _jsonable(value):
    if isinstance(value, bytes):
        return {"__b64__": b64encode(value).decode("ascii")}
    return value


def default_mode() -> str:
    # Invalid values surface in the Monitor constructor instead of being
    # silently coerced; a typo must not quietly change enforcement.
    return os.environ.get(MODE_ENV_VAR, ENFORCE)


class Monitor:
    """Checks every message crossing one principal's endpoints.

    ``resolver`` turns a protocol reference from an invitation into a
    LocalProtocol (raising KeyError/LookupError when it cannot).
    """

    def __init__(
        self,
        resolver: Callable[[str], LocalProtocol],
        mode: Optional[str] = None,
        engine: Optional[LogicEngine] = None,
        record_trace: bool = True,
    ):
        self.resolver = resolver
        self.mode = mode or default_mode()
        if self.mode not in (ENFORCE, SUPPRESS):
            raise ValueError(f"unknown monitor mode {self.mode!r}")
        self.engine = engine or BuiltinLogicEngine()
        self.record_trace = record_trace
        self.sessions: Dict[tuple, SessionState] = {}
        self.trace: List[TraceEntry] = []

    # --- session lifecycle ------------------------------------------------

    def init_session(self, cid: str, role: str, protocol_ref: str) -> tuple:
        """Create (or idempotently re-accept) the session for (cid, role)."""
        key = (cid, role)
        existing = self.sessions.get(key)
        if existing is not None:
            if existing.protocol_ref == protocol_ref:
                return key
            raise ConflictingInvitation(
                f"session {key} already follows {existing.protocol_ref!r}, "
                f"invitation names {protocol_ref!r}"
            )
        try:
            protocol = self.resolver(protocol_ref)
        except LookupError as exc:
            raise UnresolvableProtocol(f"no local protocol for {protocol_ref!r}") from exc
        if protocol.self_role != role:
            raise UnresolvableProtocol(
                f"{protocol_ref!r} is the view of {protocol.self_role}, "
                f"but the invitation is for role {role}"
            )
        machine = fsmmod.compile(protocol)
        state = SessionState(
            protocol_ref=protocol_ref,
            fsm=machine,
            cursors=[t.initial for t in machine.threads],
            activated={0},
        )
        self.sessions[key] = state
        self._settle(state)
        self._refresh_status(state)
        return key

    def session_status(self, key: tuple) -> str:
        state = self.sessions.get(tuple(key))
        return state.status if state is not None else UNKNOWN

    def enabled_triples(self, key: tuple) -> set:
        """The (label, sender, receiver) triples acceptable right now."""
        state = self.sessions.get(tuple(key))
        if state is None:
            return set()
        return self.enabled_triples_of(state)

    # --- checking ----------------------------------------------------------

    def check(self, message, role: str) -> MonitorVerdict:
        """Check one in-session message against the (cid, role) session.

        On acceptance the matching thread cursor advances and payload fields
        are bound; on violation nothing advances and the session status
        becomes ``violated``.
        """
        key = (message.cid, role)
        state = self.sessions.get(key)
        if state is None:
            verdict = MonitorVerdict(False, UNKNOWN_SESSION, f"no session {key}")
            self._record(message, role, verdict)
            return verdict

        triple = (message.label, message.sender, message.receiver)
        machine = state.fsm
        hit = None
        tid = machine.triple_thread.get(triple)
        if tid is not None and self._thread_active(state, tid):
            tkey = fsmmod.TransitionKey(state.cursors[tid], *triple)
            value = machine.threads[tid].transitions.get(tkey)
            if value is not None and not fsmmod.join_started(
                machine, state.activated, tid, tkey.state
            ):
                hit = (tid, value)

        if hit is None:
            verdict = self._miss(state, triple)
        else:
            verdict = self._fire(state, message, *hit)
        if not verdict.ok:
            state.status = VIOLATED
        self._record(message, role, verdict)
        return verdict

    def _fire(self, state: SessionState, message, tid: int, value) -> MonitorVerdict:
        binders = value.var_binders
        if len(message.payload) != len(binders):
            return MonitorVerdict(
                False,
                PAYLOAD_ARITY,
                f"{message.label} carries {len(message.payload)} fields, "
                f"{len(binders)} declared",
            )
        bound = {name: pair[1] for name, pair in zip(binders, message.payload)}
        if value.assertion is not None:
            result = self.engine.eval(value.assertion, {**state.env, **bound})
            if result is not True:
                detail = (
                    f"evaluation error: {result.detail}"
                    if isinstance(result, EvalError)
                    else f"{value.assertion.source_text} is false"
                )
                return MonitorVerdict(False, ASSERTION_FAILED, detail)
        state.env.update(bound)
        state.cursors[tid] = value.next_state
        state.activated.add(tid)  # firing commits the thread
        self._settle(state)
        self._refresh_status(state)
        return ACCEPT

    def _miss(self, state: SessionState, triple) -> MonitorVerdict:
        label = triple[0]
        if state.status == COMPLETED:
            return MonitorVerdict(
                False, AFTER_COMPLETION, f"{label} arrived after completion"
            )
        enabled = self.enabled_triples_of(state)
        if any(t[0] == label for t in enabled):
            return MonitorVerdict(
                False,
                WRONG_PEER,
                f"{label} expected between other roles, saw {triple[1]}->{triple[2]}",
            )
        return MonitorVerdict(False, UNEXPECTED_LABEL, f"{label} is not expected here")

    def enabled_triples_of(self, state: SessionState) -> set:
        out = set()
        for tid in fsmmod.active_threads(state.fsm, state.cursors):
            thread = state.fsm.threads[tid]
            if fsmmod.join_started(state.fsm, state.activated, tid, state.cursors[tid]):
                continue
            for tkey in thread.by_state.get(state.cursors[tid], ()):
                out.add((tkey.label, tkey.sender, tkey.receiver))
        return out

    # --- internals ----------------------------------------------------------

    def _thread_active(self, state: SessionState, tid: int) -> bool:
        machine = state.fsm
        while True:
            thread = machine.threads[tid]
            if thread.parent is None:
                return True
            if state.cursors[thread.parent] != thread.spawn_state:
                return False
            tid = thread.parent

    def _settle(self, state: SessionState) -> None:
        """Fire every join whose children have all finished.

        Threads enter ``activated`` only when they fire a transition, so a
        parallel block sitting untaken behind a rival choice branch never
        holds completion hostage.
        """
        machine = state.fsm
        changed = True
        while changed:
            changed = False
            for tid in fsmmod.active_threads(machine, state.cursors):
                thread = machine.threads[tid]
                join = thread.joins.get(state.cursors[tid])
                if join is None:
                    continue
                if all(state.cursors[c] in machine.terminal for c in join.children):
                    state.cursors[tid] = join.next_state
                    changed = True

    def _refresh_status(self, state: SessionState) -> None:
        if state.status == VIOLATED:
            return
        done = all(
            state.cursors[tid] in state.fsm.terminal for tid in state.activated
        )
        state.status = COMPLETED if done else ACTIVE

    def _record(self, message, role: str, verdict: MonitorVerdict) -> None:
        if not self.record_trace:
            return
        self.trace.append(
            TraceEntry(
                cid=message.cid,
                role=role,
                direction="outgoing" if message.sender == role else "incoming",
                label=message.label,
                sender=message.sender,
                receiver=message.receiver,
                ok=verdict.ok,
                kind=verdict.kind,
            )
        )
