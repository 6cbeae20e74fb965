"""Endpoint lifecycle over the mediated broker.

Broker delivery is synchronous, so sequential send/receive calls in one
thread exercise the full mediation chain deterministically; threads appear
only where blocking behaviour itself is under test.
"""

import threading

import pytest

from parley.endpoint import (
    ConversationRuntime,
    FORWARDER,
    NONE,
    inbox_queue,
    make_invitation_config,
)
from parley.store import local_ref
from parley.wire import (
    IN_SESSION,
    INVITATION,
    ConversationMessage,
    DuplicateRegistration,
    IncompleteConfig,
    InvitationConfig,
    InvitationEntry,
    NotJoined,
    RoleMismatch,
    SessionEnded,
    Timeout,
    TransportError,
    UnknownPeerRole,
    X_INVITED_BY,
    X_MEDIATED_IN,
    X_MEDIATED_OUT,
    X_PROTOCOL_REF,
    X_ROLE,
    encode_message,
)

from conftest import DAQ_PRINCIPALS


def start(daq_store, daq_config, **kw):
    runtime = ConversationRuntime(daq_store, **kw)
    u = runtime.endpoint("user")
    cid = u.create("DataAquisition", daq_config)
    a = runtime.endpoint("agg").join("A")
    i = runtime.endpoint("instr").join("I")
    return runtime, cid, u, a, i


def run_not_supported(u, a, i):
    u.send("A", "Request", {"info": "x"})
    assert a.receive("U") == ("Request", {"info": "x"})
    a.send("I", "Request", {"info": "x"})
    assert i.receive("A") == ("Request", {"info": "x"})
    i.send("A", "NotSupported")
    assert a.receive("I") == ("NotSupported", {})
    a.send("I", "Stop")
    assert i.receive("A") == ("Stop", {})
    a.send("U", "Stop")
    assert u.receive("A") == ("Stop", {})


def test_monitored_not_supported_run(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    runtime.await_accepts(cid, 3, timeout=1)
    run_not_supported(u, a, i)
    assert u.status() == "completed"
    assert a.status() == "completed"
    assert i.status() == "completed"
    assert runtime.dropped == []
    assert runtime.mediation_violations == []


def test_monitored_polling_run(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    u.send("A", "Request", {"info": "wind"})
    a.receive("U")
    a.send("I", "Request", {"info": "wind"})
    i.receive("A")
    i.send("A", "Support")
    assert a.receive("I") == ("Support", {})
    for round_no in range(2):
        a.send("I", "Poll")
        assert i.receive("A") == ("Poll", {})
        i.send("A", "Raw", {"data": bytes(10 * (round_no + 1))})
        label, payload = a.receive("I")
        assert label == "Raw"
        assert len(payload["data"]) == 10 * (round_no + 1)
        i.send("U", "Formatted", {"data": b"reading"})
        assert u.receive("I") == ("Formatted", {"data": b"reading"})
    a.send("I", "Poll")
    i.receive("A")
    i.send("A", "Stop")
    assert a.receive("I") == ("Stop", {})
    a.send("U", "Stop")
    assert u.receive("A") == ("Stop", {})
    assert {u.status(), a.status(), i.status()} == {"completed"}


def test_create_checks_config_against_roles(daq_store, daq_config):
    runtime = ConversationRuntime(daq_store)
    u = runtime.endpoint("user")
    missing = InvitationConfig(daq_config.entries[:2])
    with pytest.raises(IncompleteConfig, match="missing roles: I"):
        u.create("DataAquisition", missing)
    extra = InvitationConfig(
        daq_config.entries + (InvitationEntry("Z", "zed", "DataAquisition_Z.scr"),)
    )
    with pytest.raises(IncompleteConfig, match="unknown roles: Z"):
        u.create("DataAquisition", extra)
    stranger = runtime.endpoint("stranger")
    with pytest.raises(IncompleteConfig, match="no invitation entry"):
        stranger.create("DataAquisition", daq_config)


def test_create_accepts_config_file_path(daq_store, tmp_path):
    path = tmp_path / "daq.yml"
    path.write_text(
        "invitations:\n"
        + "".join(
            f"  - role: {role}\n"
            f"    principal name: {principal}\n"
            f"    local capability: {local_ref('DataAquisition', role)}\n"
            for role, principal in DAQ_PRINCIPALS.items()
        )
    )
    runtime = ConversationRuntime(daq_store)
    u = runtime.endpoint("user")
    cid = u.create("DataAquisition", str(path))
    assert u.cid == cid
    assert u.role == "U"
    assert u.roles == ("U", "A", "I")


def test_double_create_and_double_join_rejected(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    with pytest.raises(TransportError):
        u.create("DataAquisition", daq_config)
    with pytest.raises(TransportError):
        a.join("A", timeout=0.1)


def test_join_role_and_principal_mismatch(daq_store, daq_config):
    runtime = ConversationRuntime(daq_store)
    runtime.endpoint("user").create("DataAquisition", daq_config)
    agg = runtime.endpoint("agg")
    with pytest.raises(RoleMismatch, match="belongs to agg"):
        agg.join("A", principal="instr")
    with pytest.raises(RoleMismatch, match="offers role A"):
        agg.join("I")


def test_join_times_out_without_invitation(daq_store):
    runtime = ConversationRuntime(daq_store)
    with pytest.raises(Timeout):
        runtime.endpoint("agg").join("A", timeout=0.05)


def test_unjoined_and_unknown_peer_errors(daq_store, daq_config):
    runtime = ConversationRuntime(daq_store)
    lone = runtime.endpoint("user")
    with pytest.raises(NotJoined):
        lone.send("A", "Request", {"info": "x"})
    with pytest.raises(NotJoined):
        lone.receive("A")
    cid = lone.create("DataAquisition", daq_config)
    with pytest.raises(UnknownPeerRole, match="own role"):
        lone.send("U", "Request")
    with pytest.raises(UnknownPeerRole):
        lone.receive("Q", timeout=0.1)


def test_receive_timeout(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    with pytest.raises(Timeout):
        u.receive("A", timeout=0.05)


def test_stop_unblocks_receive_and_is_idempotent(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    threading.Timer(0.05, u.stop).start()
    with pytest.raises(SessionEnded):
        u.receive("A", timeout=2)
    u.stop()
    with pytest.raises(NotJoined):
        u.send("A", "Request", {"info": "x"})


def test_receive_after_completion_raises_session_ended(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    run_not_supported(u, a, i)
    with pytest.raises(SessionEnded, match="completed"):
        u.receive("A", timeout=1)


def test_receive_async_callbacks(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    got = []
    fired = threading.Event()
    u.receive_async("A", lambda label, payload: (got.append((label, payload)), fired.set()))
    with pytest.raises(DuplicateRegistration):
        u.recv_async("A", lambda label, payload: None)
    u.send("A", "Request", {"info": "x"})
    a.receive("U")
    a.send("I", "Request", {"info": "x"})
    i.receive("A")
    i.send("A", "NotSupported")
    a.receive("I")
    a.send("I", "Stop")
    i.receive("A")
    a.send("U", "Stop")
    assert fired.wait(2)
    assert got == [("Stop", {})]
    # a fresh registration with the message already buffered fires immediately
    again = threading.Event()
    runtime2, cid2, u2, a2, i2 = start(daq_store, daq_config)
    u2.send("A", "Request", {"info": "y"})
    a2.receive_async("U", lambda label, payload: again.set())
    assert again.wait(2)
    assert u.callback_errors == []


def test_callback_exception_is_contained(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)

    def boom(label, payload):
        raise RuntimeError("callback bug")

    a.receive_async("U", boom)
    u.send("A", "Request", {"info": "x"})
    deadline = threading.Event()
    deadline.wait(0.2)
    assert len(a.callback_errors) == 1
    # delivery survived; the conversation can continue
    a.send("I", "Request", {"info": "x"})
    assert i.receive("A") == ("Request", {"info": "x"})


def test_enforce_drops_illegal_send(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    u.send("A", "Poll")  # the user never polls
    assert len(runtime.dropped) == 1
    stage, verdict, message = runtime.dropped[0]
    assert stage == "send"
    assert verdict.kind == "unexpected-label"
    assert u.status() == "violated"
    with pytest.raises(Timeout):
        a.receive("U", timeout=0.05)
    assert a.status() == "active"


def test_suppress_forwards_but_flags(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config, monitor_mode="suppress")
    u.send("A", "Request", {"info": "x"})
    a.receive("U")
    u.send("A", "Request", {"info": "again"})  # out of turn
    assert a.receive("U") == ("Request", {"info": "again"})
    assert runtime.dropped == []
    assert u.status() == "violated"
    assert a.status() == "violated"


def test_forwarder_mediates_without_checking(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config, case=FORWARDER)
    run_not_supported(u, a, i)
    assert u.status() == "unknown"
    assert runtime.monitor_for("user") is None
    # no FSM anywhere: an out-of-protocol message sails through
    u.send("A", "Gibberish")
    assert a.receive("U") == ("Gibberish", {})


def test_unmediated_case(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config, case=NONE)
    run_not_supported(u, a, i)
    assert u.status() == "unknown"
    assert runtime.mediation_violations == []


def test_await_accepts(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    runtime.await_accepts(cid, 3, timeout=1)
    with pytest.raises(Timeout):
        runtime.await_accepts(cid, 4, timeout=0.05)


def test_unmediated_invitation_never_binds(daq_store):
    runtime = ConversationRuntime(daq_store)
    node = runtime.node("user")
    sneaky = ConversationMessage(
        kind=INVITATION,
        cid="forged",
        sender="A",
        receiver="U",
        extras=(
            (X_ROLE, "U"),
            (X_PROTOCOL_REF, local_ref("DataAquisition", "U")),
            (X_INVITED_BY, "agg"),
        ),
    )
    with node.cond:
        node.invitations.append(sneaky)
        node.cond.notify_all()
    ep = runtime.endpoint("user")
    with pytest.raises(Timeout):
        ep.join("U", timeout=0.1)
    assert ep.mediation_violations[0][0] == "invitation"
    assert runtime.mediation_violations


def test_pushed_message_without_tags_is_refused(daq_store, daq_config):
    # straight onto the inbox queue, around both mediators
    runtime, cid, u, a, i = start(daq_store, daq_config)
    forged = ConversationMessage(
        kind=IN_SESSION, cid=cid, sender="A", receiver="U", label="Stop"
    )
    runtime.broker.push(inbox_queue("user", cid), encode_message(forged))
    assert len(runtime.mediation_violations) == 1
    queue_name, reason, message = runtime.mediation_violations[0]
    assert queue_name == inbox_queue("user", cid)
    assert "mediation" in reason
    with pytest.raises(Timeout):
        u.receive("A", timeout=0.05)


def test_forged_tags_are_refused(daq_store, daq_config):
    runtime, cid, u, a, i = start(daq_store, daq_config)
    forged = ConversationMessage(
        kind=IN_SESSION,
        cid=cid,
        sender="A",
        receiver="U",
        label="Stop",
        extras=((X_MEDIATED_OUT, "I"), (X_MEDIATED_IN, "U")),
    )
    runtime.broker.push(inbox_queue("user", cid), encode_message(forged))
    assert runtime.mediation_violations
    with pytest.raises(Timeout):
        u.receive("A", timeout=0.05)


def test_injected_exchange_message_is_checked_then_audited(daq_store, daq_config):
    # publishing to the session exchange reaches the receiver-side mediator:
    # an illegal forgery is dropped by its monitor, a legal-looking one gets
    # a receive stamp but still fails the inbox audit (no sender stamp)
    runtime, cid, u, a, i = start(daq_store, daq_config)
    illegal = ConversationMessage(
        kind=IN_SESSION, cid=cid, sender="I", receiver="A", label="Raw"
    )
    runtime.broker.publish(f"s.{cid}", f"{cid}.I.A", encode_message(illegal))
    assert [stage for stage, _, _ in runtime.dropped] == ["deliver"]

    legal = ConversationMessage(
        kind=IN_SESSION,
        cid=cid,
        sender="U",
        receiver="A",
        label="Request",
        payload=(("info", "x"),),
    )
    runtime.broker.publish(f"s.{cid}", f"{cid}.U.A", encode_message(legal))
    assert runtime.mediation_violations
    with pytest.raises(Timeout):
        a.receive("U", timeout=0.05)


def test_make_invitation_config_uses_reference_convention(daq_config):
    entry = daq_config.entry_for_role("I")
    assert entry.principal == "instr"
    assert entry.capability == local_ref("DataAquisition", "I")
    assert daq_config.roles() == {"U", "A", "I"}
