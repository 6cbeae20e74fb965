"""Monitoring-overhead benchmarks.

Each scenario runs one conversation between two principals under three
mediation cases: full monitoring, a forwarder that mediates and stamps but
never checks (the baseline that isolates checking cost from mediation cost),
and no mediation at all. A repetition builds a fresh runtime and broker,
creates the session (so FSM compilation is inside the timed window, where it
amortizes over the session), drives the scripted exchange, and tears down.
Delivery is synchronous in the sender's thread, so a single thread can play
both roles without deadlock.

Scenarios:

* ``session-length``: a recursive ping-pong; the parameter is the number of
  OK/ACK rounds before the closing KO, so a run carries 2n+1 messages.
* ``protocol-size``: 2k parallel branches, each a single send; the local FSM
  grows linearly (4k+2 states) while the flat product grows as 4^k. The
  parameter is k, a run carries 2k messages.
* ``payload-size``: one ping-pong round plus KO (3 messages) carrying a
  bytes payload of the given size.
"""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .endpoint import FORWARDER, MONITOR, NONE, ConversationRuntime, make_invitation_config
from .parser import parse_global
from .store import ProtocolStore

CASES = ("Monitor", "Forwarder", "NoMonitor")
_CASE_RUNTIME = {"Monitor": MONITOR, "Forwarder": FORWARDER, "NoMonitor": NONE}

DEFAULT_REPETITIONS = 100
DEFAULT_WARMUP = 10

SESSION_LENGTH_PARAMS = tuple(range(100, 1001, 100))
PROTOCOL_SIZE_PARAMS = (1, 2, 3, 4, 5, 6)
PAYLOAD_SIZE_PARAMS = (64, 256, 1024, 4096, 16384, 65536)


@dataclass(frozen=True)
class BenchRecord:
    scenario: str
    parameter: int
    case: str
    mean_ns: float
    stddev_ns: float
    repetitions: int


def pingpong_source(with_payload: bool = False) -> str:
    name = "Echo" if with_payload else "PingPong"
    payload = "(data)" if with_payload else ""
    return (
        f"global protocol {name}(role S, role C) {{\n"
        f"    rec X {{\n"
        f"        choice at S {{\n"
        f"            OK{payload} from S to C;\n"
        f"            ACK{payload} from C to S;\n"
        f"            X;\n"
        f"        }} or {{\n"
        f"            KO from S to C;\n"
        f"        }}\n"
        f"    }}\n"
        f"}}\n"
    )


def wide_source(k: int) -> str:
    branches = []
    for i in range(1, k + 1):
        branches.append(f"        OK{i} from S to C;")
        branches.append(f"        ACK{i} from C to S;")
    blocks = "\n    } and {\n".join(branches)
    return (
        f"global protocol Wide{k}(role S, role C) {{\n"
        f"    parallel {{\n"
        f"{blocks}\n"
        f"    }}\n"
        f"}}\n"
    )


def _drive_pingpong(server, client, rounds: int) -> None:
    for _ in range(rounds):
        server.send("C", "OK")
        client.receive("S")
        client.send("S", "ACK")
        server.receive("C")
    server.send("C", "KO")
    client.receive("S")


def _drive_wide(server, client, k: int) -> None:
    for i in range(1, k + 1):
        server.send("C", f"OK{i}")
    for i in range(1, k + 1):
        client.receive("S")
        client.send("S", f"ACK{i}")
    for _ in range(k):
        server.receive("C")


def _drive_payload(server, client, size: int) -> None:
    blob = bytes(size)
    server.send("C", "OK", {"data": blob})
    client.receive("S")
    client.send("S", "ACK", {"data": blob})
    server.receive("C")
    server.send("C", "KO")
    client.receive("S")


@dataclass(frozen=True)
class Scenario:
    name: str
    params: Tuple[int, ...]
    protocol_name: Callable[[int], str]
    source: Callable[[int], str]
    drive: Callable[[object, object, int], None]
    messages: Callable[[int], int]


SCENARIOS: Dict[str, Scenario] = {
    "session-length": Scenario(
        name="session-length",
        params=SESSION_LENGTH_PARAMS,
        protocol_name=lambda n: "PingPong",
        source=lambda n: pingpong_source(),
        drive=_drive_pingpong,
        messages=lambda n: 2 * n + 1,
    ),
    "protocol-size": Scenario(
        name="protocol-size",
        params=PROTOCOL_SIZE_PARAMS,
        protocol_name=lambda k: f"Wide{k}",
        source=wide_source,
        drive=_drive_wide,
        messages=lambda k: 2 * k,
    ),
    "payload-size": Scenario(
        name="payload-size",
        params=PAYLOAD_SIZE_PARAMS,
        protocol_name=lambda s: "Echo",
        source=lambda s: pingpong_source(with_payload=True),
        drive=_drive_payload,
        messages=lambda s: 3,
    ),
}


def messages_per_session(scenario: str, parameter: int) -> int:
    return SCENARIOS[scenario].messages(parameter)


def _store_for(scenario: Scenario, params: Sequence[int]) -> ProtocolStore:
    store = ProtocolStore()
    seen = set()
    for param in params:
        name = scenario.protocol_name(param)
        if name in seen:
            continue
        seen.add(name)
        protocol = parse_global(scenario.source(param))
        store.register_global(protocol)
        store.register_projections(protocol)
    return store


def _run_once(scenario: Scenario, param: int, case: str, store: ProtocolStore, clock) -> int:
    config = make_invitation_config(
        scenario.protocol_name(param), {"S": "srv", "C": "cli"}
    )
    started = clock()
    runtime = ConversationRuntime(store, case=_CASE_RUNTIME[case], record_trace=False)
    server = runtime.endpoint("srv")
    server.create(scenario.protocol_name(param), config)
    client = runtime.endpoint("cli").join("C")
    scenario.drive(server, client, param)
    server.stop()
    client.stop()
    runtime.close()
    return clock() - started


def bench_run(
    scenario_name: str,
    params: Optional[Iterable[int]] = None,
    cases: Sequence[str] = CASES,
    repetitions: int = DEFAULT_REPETITIONS,
    warmup: int = DEFAULT_WARMUP,
    clock=time.monotonic_ns,
) -> List[BenchRecord]:
    scenario = SCENARIOS[scenario_name]
    chosen = tuple(params) if params is not None else scenario.params
    for case in cases:
        if case not in CASES:
            raise ValueError(f"unknown case {case!r}")
    store = _store_for(scenario, chosen)
    samples: Dict[Tuple[int, str], List[int]] = {
        (param, case): [] for param in chosen for case in cases
    }
    # The collector is paused while a window is timed and runs between
    # windows instead; repetitions are interleaved round-robin across the
    # cases so machine drift lands on every case equally rather than
    # biasing whichever case's block it happens to hit. Both matter for
    # the overhead ratios: a collection pause or a slow patch inside one
    # case's block shows up as a phantom overhead shift.
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for param in chosen:
            for case in cases:
                for _ in range(warmup):
                    _run_once(scenario, param, case, store, clock)
            gc.collect()
            for _ in range(repetitions):
                for case in cases:
                    samples[(param, case)].append(
                        _run_once(scenario, param, case, store, clock)
                    )
                    gc.collect()
    finally:
        if was_enabled:
            gc.enable()
    records = []
    for param in chosen:
        for case in cases:
            cell = samples[(param, case)]
            records.append(
                BenchRecord(
                    scenario=scenario.name,
                    parameter=param,
                    case=case,
                    mean_ns=statistics.mean(cell),
                    stddev_ns=statistics.stdev(cell) if len(cell) > 1 else 0.0,
                    repetitions=repetitions,
                )
            )
    return records


def bench_report(records: Sequence[BenchRecord]) -> str:
    """CSV with relative overhead against the Forwarder baseline."""
    baselines = {
        (r.scenario, r.parameter): r.mean_ns
        for r in records
        if r.case == "Forwarder"
    }
    lines = ["scenario,parameter,case,mean_ns,stddev_ns,overhead_vs_forwarder_pct"]
    for r in records:
        base = baselines.get((r.scenario, r.parameter))
        if base is None or base == 0:
            overhead = ""
        elif r.case == "Forwarder":
            overhead = "0.00"
        else:
            overhead = f"{(r.mean_ns - base) / base * 100:.2f}"
        lines.append(
            f"{r.scenario},{r.parameter},{r.case},"
            f"{r.mean_ns:.0f},{r.stddev_ns:.0f},{overhead}"
        )
    return "\n".join(lines) + "\n"
