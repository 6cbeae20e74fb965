"""Wire format round trips and invitation config parsing."""

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from parley.wire import (
    IN_SESSION,
    INVITATION,
    ConversationMessage,
    IncompleteConfig,
    InvitationConfig,
    WireError,
    decode_message,
    encode_message,
    load_invitation_config,
    parse_invitation_config,
    payload_from_dict,
)


def make(**kw):
    base = dict(kind=IN_SESSION, cid="c1", sender="A", receiver="B")
    base.update(kw)
    return ConversationMessage(**base)


def test_round_trip_all_payload_types():
    msg = make(
        label="Mix",
        payload=(("n", 7), ("flag", True), ("name", "hi"), ("blob", b"\x00\xffraw")),
        extras=(("mediated_out", "A"),),
    )
    again = decode_message(encode_message(msg))
    assert again == msg


def test_bool_is_not_collapsed_to_int():
    # bool subclasses int; the type tag must say bool and decode must keep it
    wire = encode_message(make(label="B", payload=(("flag", False),)))
    doc = json.loads(wire)
    assert doc["payload"][0]["type"] == "bool"
    value = decode_message(wire).payload_dict()["flag"]
    assert value is False


def test_bytes_travel_base64():
    wire = encode_message(make(label="D", payload=(("data", b"\x01\x02"),)))
    doc = json.loads(wire)
    assert doc["payload"][0] == {"name": "data", "type": "bytes", "value": "AQI="}


def test_encoding_is_canonical():
    a = make(label="L", payload=(("x", 1),), extras=(("k", "v"),))
    assert encode_message(a) == encode_message(a)


def test_invitation_kind_round_trips():
    msg = ConversationMessage(
        kind=INVITATION,
        cid="c9",
        sender="broker",
        receiver="alice",
        extras=(("role", "U"), ("protocol_ref", "DataAquisition_U.scr")),
    )
    again = decode_message(encode_message(msg))
    assert again.kind == INVITATION
    assert again.extra("role") == "U"
    assert again.extra("missing", "dflt") == "dflt"


def test_with_extras_overwrites_and_preserves():
    msg = make(extras=(("a", "1"), ("b", "2")))
    stamped = msg.with_extras(b="3", c="4")
    assert stamped.extras_dict() == {"a": "1", "b": "3", "c": "4"}
    assert msg.extras_dict() == {"a": "1", "b": "2"}


def test_payload_from_dict():
    assert payload_from_dict(None) == ()
    assert payload_from_dict({}) == ()
    assert dict(payload_from_dict({"x": 1, "s": "a"})) == {"x": 1, "s": "a"}
    with pytest.raises(WireError):
        payload_from_dict({"x": 1.5})


def test_encode_rejects_unsupported_payload_type():
    with pytest.raises(WireError):
        encode_message(make(label="L", payload=(("x", [1]),)))


@pytest.mark.parametrize(
    "mangle",
    [
        lambda d: b"\xff\xfe not utf8 \xff",
        lambda d: b"not json{",
        lambda d: b'["a","list"]',
        lambda d: json.dumps({k: v for k, v in d.items() if k != "cid"}).encode(),
        lambda d: json.dumps(dict(d, kind="telegram")).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "bytes", "value": "!!"}])
        ).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "int", "value": True}])
        ).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "int", "value": "7"}])
        ).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "bool", "value": 1}])
        ).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "string", "value": 7}])
        ).encode(),
        lambda d: json.dumps(
            dict(d, payload=[{"name": "x", "type": "float", "value": 1}])
        ).encode(),
        lambda d: json.dumps(dict(d, extras={"k": 5})).encode(),
        lambda d: json.dumps(dict(d, extras=["k"])).encode(),
    ],
)
def test_decode_rejects_malformed(mangle):
    doc = json.loads(encode_message(make(label="L")))
    with pytest.raises(WireError):
        decode_message(mangle(doc))


payload_values = st.one_of(
    st.booleans(),
    st.integers(),
    st.text(max_size=40),
    st.binary(max_size=40),
)


@given(
    st.lists(
        st.tuples(st.text(min_size=1, max_size=10), payload_values),
        max_size=6,
        unique_by=lambda kv: kv[0],
    ),
    st.dictionaries(st.text(min_size=1, max_size=8), st.text(max_size=8), max_size=4),
)
def test_round_trip_random(payload, extras):
    msg = make(label="R", payload=tuple(payload), extras=tuple(extras.items()))
    assert decode_message(encode_message(msg)) == msg


CONFIG = """\
invitations:
  - role: U
    principal name: alice
    local capability: DataAquisition_U.scr
  - role: A
    principal name: bob
    local capability: DataAquisition_A.scr
  - role: I
    principal name: bob
    local capability: DataAquisition_I.scr
"""


def test_parse_invitation_config():
    config = parse_invitation_config(CONFIG)
    assert isinstance(config, InvitationConfig)
    assert config.roles() == {"U", "A", "I"}
    entry = config.entry_for_role("A")
    assert entry.principal == "bob"
    assert entry.capability == "DataAquisition_A.scr"
    assert config.entry_for_role("Z") is None
    assert [e.role for e in config.entries_for_principal("bob")] == ["A", "I"]


def test_underscore_key_variants_accepted():
    config = parse_invitation_config(
        "invitations:\n"
        "  - role: U\n"
        "    principal_name: alice\n"
        "    local_capability: P_U.scr\n"
    )
    assert config.entry_for_role("U").capability == "P_U.scr"


@pytest.mark.parametrize(
    "text",
    [
        "invitations: [",
        "roles: []",
        "invitations: {}",
        "invitations: []",
        "invitations:\n  - just a string\n",
        "invitations:\n  - role: U\n    principal name: alice\n",
        "invitations:\n  - principal name: alice\n    local capability: x\n",
        CONFIG + "  - role: U\n    principal name: eve\n    local capability: x\n",
    ],
)
def test_bad_configs_rejected(text):
    with pytest.raises(IncompleteConfig):
        parse_invitation_config(text)


def test_load_invitation_config(tmp_path):
    path = tmp_path / "inv.yml"
    path.write_text(CONFIG)
    assert load_invitation_config(str(path)).roles() == {"U", "A", "I"}
