"""Topic routing, queue buffering and the loopback wire mode."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from parley.broker import Broker, BrokerError, _pattern_matches


def matches(pattern, key):
    return _pattern_matches(pattern.split("."), key.split("."))


@pytest.mark.parametrize(
    "pattern,key,expect",
    [
        ("a.b", "a.b", True),
        ("a.b", "a.c", False),
        ("a.b", "a.b.c", False),
        ("*", "a", True),
        ("*", "a.b", False),
        ("a.*", "a.b", True),
        ("a.*.c", "a.x.c", True),
        ("a.*.c", "a.x.y.c", False),
        ("#", "", True),
        ("#", "a.b.c", True),
        ("a.#", "a", True),
        ("a.#", "a.b.c", True),
        ("a.#", "b.c", False),
        ("#.c", "a.b.c", True),
        ("#.c", "c", True),
        ("#.c", "a.c.b", False),
        ("a.#.c", "a.c", True),
        ("a.#.c", "a.x.y.c", True),
    ],
)
def test_pattern_matching(pattern, key, expect):
    assert matches(pattern, key) is expect


segment = st.text(alphabet="abcx", min_size=1, max_size=3)


@given(st.lists(segment, min_size=1, max_size=5))
def test_exact_pattern_matches_only_itself(segments):
    key = ".".join(segments)
    assert matches(key, key)
    assert not matches(key, key + ".z")
    assert not matches(key + ".z", key)


@given(st.lists(segment, min_size=1, max_size=5), st.integers(0, 5))
def test_star_matches_any_single_segment(segments, pos):
    pos = pos % len(segments)
    pattern = ".".join("*" if i == pos else s for i, s in enumerate(segments))
    assert matches(pattern, ".".join(segments))


@given(st.lists(segment, min_size=1, max_size=4), st.lists(segment, max_size=3))
def test_hash_matches_any_tail(head, tail):
    pattern = ".".join(head + ["#"])
    assert matches(pattern, ".".join(head + tail))


def test_publish_routes_to_matching_queues():
    broker = Broker()
    broker.declare_exchange("ex")
    for name in ("q1", "q2", "q3"):
        broker.declare_queue(name)
    broker.bind("ex", "s.*.A", "q1")
    broker.bind("ex", "s.#", "q2")
    broker.bind("ex", "t.#", "q3")
    assert broker.publish("ex", "s.B.A", b"one") == 2
    assert broker.pending("q1") == 1
    assert broker.pending("q2") == 1
    assert broker.pending("q3") == 0


def test_consumer_gets_buffered_backlog_on_attach():
    broker = Broker()
    broker.declare_exchange("ex")
    broker.declare_queue("q")
    broker.bind("ex", "#", "q")
    broker.publish("ex", "k", b"first")
    broker.publish("ex", "k", b"second")
    got = []
    broker.set_consumer("q", got.append)
    assert got == [b"first", b"second"]
    assert broker.pending("q") == 0
    broker.publish("ex", "k", b"third")
    assert got == [b"first", b"second", b"third"]


def test_detached_consumer_buffers_again():
    broker = Broker()
    broker.declare_queue("q")
    got = []
    broker.set_consumer("q", got.append)
    broker.push("q", b"a")
    broker.set_consumer("q", None)
    broker.push("q", b"b")
    assert got == [b"a"]
    assert broker.pending("q") == 1


def test_consumer_republish_runs_before_publish_returns():
    # synchronous delivery: a consumer chain finishes inside the first publish
    broker = Broker()
    broker.declare_exchange("ex")
    broker.declare_queue("relay")
    broker.declare_queue("sink")
    broker.bind("ex", "hop.one", "relay")
    broker.bind("ex", "hop.two", "sink")
    seen = []
    broker.set_consumer("relay", lambda data: broker.publish("ex", "hop.two", data + b"!"))
    broker.set_consumer("sink", seen.append)
    broker.publish("ex", "hop.one", b"msg")
    assert seen == [b"msg!"]


def test_duplicate_binding_delivers_once():
    broker = Broker()
    broker.declare_exchange("ex")
    broker.declare_queue("q")
    broker.bind("ex", "a.#", "q")
    broker.bind("ex", "a.#", "q")
    assert broker.publish("ex", "a.b", b"x") == 1


def test_unbind_and_delete_queue():
    broker = Broker()
    broker.declare_exchange("ex")
    broker.declare_queue("q")
    broker.bind("ex", "a", "q")
    broker.unbind("ex", "a", "q")
    assert broker.publish("ex", "a", b"x") == 0

    broker.bind("ex", "a", "q")
    broker.delete_queue("q")
    assert broker.publish("ex", "a", b"x") == 0
    assert broker.pending("q") == 0


def test_unknown_names_raise():
    broker = Broker()
    broker.declare_exchange("ex")
    broker.declare_queue("q")
    with pytest.raises(BrokerError):
        broker.publish("nope", "k", b"")
    with pytest.raises(BrokerError):
        broker.push("nope", b"")
    with pytest.raises(BrokerError):
        broker.bind("nope", "k", "q")
    with pytest.raises(BrokerError):
        broker.bind("ex", "k", "nope")
    with pytest.raises(BrokerError):
        broker.set_consumer("nope", lambda data: None)
    with pytest.raises(BrokerError):
        Broker(wire_mode="carrier-pigeon")


def test_loopback_round_trips_bytes_through_sockets():
    broker = Broker(wire_mode="loopback")
    broker.declare_exchange("ex")
    broker.declare_queue("q")
    broker.bind("ex", "k", "q")
    got = []
    broker.set_consumer("q", got.append)
    blob = bytes(range(256)) * 3
    broker.publish("ex", "k", blob)
    broker.publish("ex", "k", b"")
    assert got == [blob, b""]
    broker.close()
    broker.close()  # idempotent
