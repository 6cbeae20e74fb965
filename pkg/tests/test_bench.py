"""Benchmark harness mechanics (timing pinned through an injected clock)."""

import itertools

import pytest

from parley.bench import (
    BenchRecord,
    CASES,
    SCENARIOS,
    bench_report,
    bench_run,
    messages_per_session,
    pingpong_source,
    wide_source,
)
from parley.fsm import compile as compile_fsm
from parley.parser import parse_global
from parley.projection import project


def test_scenario_message_counts():
    assert messages_per_session("session-length", 100) == 201
    assert messages_per_session("protocol-size", 4) == 8
    assert messages_per_session("payload-size", 65536) == 3


def test_generated_protocols_parse_and_compile():
    pingpong = parse_global(pingpong_source())
    assert pingpong.name == "PingPong"
    echo = parse_global(pingpong_source(with_payload=True))
    assert echo.name == "Echo"
    wide = parse_global(wide_source(3))
    assert wide.name == "Wide3"
    fsm = compile_fsm(project(wide, "S").protocol)
    assert len(fsm.threads) == 2 * 3 + 1


def test_default_parameters_match_each_scenario():
    assert SCENARIOS["session-length"].params == tuple(range(100, 1001, 100))
    assert SCENARIOS["protocol-size"].params == (1, 2, 3, 4, 5, 6)
    assert SCENARIOS["payload-size"].params == (64, 256, 1024, 4096, 16384, 65536)


def test_bench_run_is_deterministic_under_fake_clock():
    ticker = itertools.count(step=1000)
    records = bench_run(
        "protocol-size",
        params=[1],
        repetitions=3,
        warmup=0,
        clock=lambda: next(ticker),
    )
    assert [r.case for r in records] == list(CASES)
    for record in records:
        assert record.scenario == "protocol-size"
        assert record.parameter == 1
        assert record.repetitions == 3
        assert record.mean_ns == 1000.0  # one tick per timed window
        assert record.stddev_ns == 0.0


def test_bench_run_real_clock_smoke():
    records = bench_run("session-length", params=[2], repetitions=2, warmup=1)
    assert len(records) == 3
    assert all(r.mean_ns > 0 for r in records)


def test_bench_run_rejects_unknown_case():
    with pytest.raises(ValueError):
        bench_run("payload-size", params=[64], cases=("Monitor", "Turbo"))
    with pytest.raises(KeyError):
        bench_run("no-such-scenario", params=[1])


def test_report_format_and_overhead_column():
    records = [
        BenchRecord("session-length", 100, "Monitor", 1500.0, 10.0, 5),
        BenchRecord("session-length", 100, "Forwarder", 1000.0, 10.0, 5),
        BenchRecord("session-length", 100, "NoMonitor", 900.0, 10.0, 5),
    ]
    lines = bench_report(records).splitlines()
    assert lines[0] == "scenario,parameter,case,mean_ns,stddev_ns,overhead_vs_forwarder_pct"
    assert lines[1] == "session-length,100,Monitor,1500,10,50.00"
    assert lines[2] == "session-length,100,Forwarder,1000,10,0.00"
    assert lines[3] == "session-length,100,NoMonitor,900,10,-10.00"


def test_report_without_baseline_leaves_overhead_blank():
    records = [BenchRecord("payload-size", 64, "Monitor", 1200.0, 0.0, 1)]
    line = bench_report(records).splitlines()[1]
    assert line.endswith(",")
