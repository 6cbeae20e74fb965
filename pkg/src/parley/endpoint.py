"""Conversation endpoints over a mediated broker.

Topology per conversation (monitored cases): an application endpoint never
talks to its peers directly. Its sends go to its principal's outbound
exchange, whose single consumer is the principal's mediator; the mediator
checks the message against the sender-side session FSM, stamps an audit tag,
and republishes onto the conversation's exchange with routing key
``<cid>.<from>.<to>``. Both ``<cid>.<role>.*`` and ``<cid>.*.<role>`` are
bound to each participant's mediator queue, so the receiver's mediator picks
the message up next, checks it against the receiver-side FSM, stamps the
second audit tag, and only then pushes it onto the endpoint's inbox queue.
Inbox delivery asserts both tags, so anything injected around the mediators
is detected and dropped there.

Invitations follow the same shape: ``create`` publishes one invitation per
configured role through the creator's mediator onto the shared ``invite``
exchange keyed by principal name; each invitee's mediator initializes the
monitor session from the carried local-protocol reference, allocates the
session queues, acknowledges back to the creator, and hands the invitation
to the application, where ``join`` claims it. The creator invites itself the
same way, so session setup has a single path.

Three mediation cases exist: ``monitor`` (full FSM checking), ``forwarder``
(mediation and tagging without any checking; the benchmark baseline), and
``none`` (endpoints bind straight to the conversation exchange).
"""

from __future__ import annotations

import queue as queuemod
import threading
import time
import uuid
from collections import deque
from typing import Dict, List, Optional

from .broker import Broker
from .monitor import ENFORCE, Monitor, MonitorError
from .store import ProtocolStore, local_ref
from .wire import (
    IN_SESSION,
    INVITATION,
    ConversationMessage,
    DuplicateRegistration,
    IncompleteConfig,
    InvitationConfig,
    NotJoined,
    RoleMismatch,
    SessionEnded,
    Timeout,
    TransportError,
    UnknownPeerRole,
    X_ACK,
    X_INVITED_BY,
    X_MEDIATED_IN,
    X_MEDIATED_OUT,
    X_PRINCIPAL,
    X_PROTOCOL_REF,
    X_ROLE,
    decode_message,
    encode_message,
    load_invitation_config,
    payload_from_dict,
)

MONITOR = "monitor"
FORWARDER = "forwarder"
NONE = "none"

_DEFAULT_TIMEOUT = 10.0


def make_invitation_config(protocol_name: str, principals: Dict[str, str]) -> InvitationConfig:
    """Convenience builder: role -> principal, capabilities by convention."""
    from .wire import InvitationEntry

    entries = tuple(
        InvitationEntry(role, principal, local_ref(protocol_name, role))
        for role, principal in principals.items()
    )
    return InvitationConfig(entries)


class _Node:
    """One principal's attachment to the broker."""

    def __init__(self, principal: str, monitor: Optional[Monitor]):
        self.principal = principal
        self.monitor = monitor
        self.invitations: deque = deque()
        self.cond = threading.Condition()
        self.errors: List[str] = []


class ConversationRuntime:
    """Shared broker, protocol store, and mediation nodes for one process."""

    def __init__(
        self,
        store: ProtocolStore,
        case: str = MONITOR,
        broker: Optional[Broker] = None,
        monitor_mode: Optional[str] = None,
        record_trace: bool = True,
        wire_mode: str = "direct",
    ):
        if case not in (MONITOR, FORWARDER, NONE):
            raise ValueError(f"unknown mediation case {case!r}")
        self.store = store
        self.case = case
        self.broker = broker or Broker(wire_mode=wire_mode)
        self.monitor_mode = monitor_mode
        self.record_trace = record_trace
        self._nodes: Dict[str, _Node] = {}
        self._lock = threading.RLock()
        self.dropped: List[tuple] = []  # (stage, verdict, message)
        self.mediation_violations: List[tuple] = []  # (queue, reason, message)
        self._acks: Dict[str, set] = {}
        self._ack_cond = threading.Condition()
        self.broker.declare_exchange("invite")

    # --- nodes --------------------------------------------------------------

    def node(self, principal: str) -> _Node:
        with self._lock:
            found = self._nodes.get(principal)
            if found is not None:
                return found
            monitor = None
            if self.case == MONITOR:
                monitor = Monitor(
                    self.store.local,
                    mode=self.monitor_mode,
                    record_trace=self.record_trace,
                )
            node = _Node(principal, monitor)
            self._nodes[principal] = node
            if self.case in (MONITOR, FORWARDER):
                out_x = f"out.{principal}"
                out_q = f"mq.out.{principal}"
                inv_q = f"mq.inv.{principal}"
                self.broker.declare_exchange(out_x)
                self.broker.declare_queue(out_q)
                self.broker.bind(out_x, "#", out_q)
                self.broker.set_consumer(out_q, lambda data, n=node: self._on_out(n, data))
                self.broker.declare_queue(inv_q)
                self.broker.bind("invite", principal, inv_q)
                self.broker.set_consumer(inv_q, lambda data, n=node: self._on_inv(n, data))
            return node

    def endpoint(self, principal: str) -> "Endpoint":
        return Endpoint(self, self.node(principal))

    def monitor_for(self, principal: str) -> Optional[Monitor]:
        return self.node(principal).monitor

    # --- mediation handlers ---------------------------------------------------

    def _on_out(self, node: _Node, data: bytes) -> None:
        """Sender-side mediation: check, stamp, and forward."""
        message = decode_message(data)
        if message.kind == INVITATION:
            target = (
                message.extra(X_INVITED_BY)
                if message.extra(X_ACK) == "true"
                else message.extra(X_PRINCIPAL)
            )
            stamped = message.with_extras(**{X_MEDIATED_OUT: message.sender})
            self.broker.publish("invite", target, encode_message(stamped))
            return
        if node.monitor is not None:
            verdict = node.monitor.check(message, message.sender)
            if not verdict.ok and node.monitor.mode == ENFORCE:
                self.dropped.append(("send", verdict, message))
                return
        stamped = message.with_extras(**{X_MEDIATED_OUT: message.sender})
        self.broker.publish(
            f"s.{message.cid}",
            f"{message.cid}.{message.sender}.{message.receiver}",
            encode_message(stamped),
        )

    def _on_inv(self, node: _Node, data: bytes) -> None:
        """Invitation arriving at its target principal's mediator."""
        message = decode_message(data)
        if message.extra(X_ACK) == "true":
            with self._ack_cond:
                self._acks.setdefault(message.cid, set()).add(message.extra(X_ROLE))
                self._ack_cond.notify_all()
            return
        role = message.extra(X_ROLE)
        capability = message.extra(X_PROTOCOL_REF)
        if node.monitor is not None:
            try:
                node.monitor.init_session(message.cid, role, capability)
            except MonitorError as exc:
                node.errors.append(str(exc))
                return
        self._declare_session(node.principal, message.cid, role)
        stamped = message.with_extras(**{X_MEDIATED_IN: role})
        with node.cond:
            node.invitations.append(stamped)
            node.cond.notify_all()
        ack = ConversationMessage(
            kind=INVITATION,
            cid=message.cid,
            sender=role,
            receiver=message.sender,
            extras=(
                (X_ACK, "true"),
                (X_ROLE, role),
                (X_PRINCIPAL, node.principal),
                (X_INVITED_BY, message.extra(X_INVITED_BY)),
            ),
        )
        self.broker.publish(
            f"out.{node.principal}", f"{message.cid}.ack", encode_message(ack)
        )

    def _declare_session(self, principal: str, cid: str, role: str) -> None:
        """Allocate the mediator's session queue and the endpoint inbox."""
        self.broker.declare_exchange(f"s.{cid}")
        inbox = inbox_queue(principal, cid)
        self.broker.declare_queue(inbox)
        mq = f"mq.s.{principal}.{cid}"
        self.broker.declare_queue(mq)
        self.broker.bind(f"s.{cid}", f"{cid}.{role}.*", mq)
        self.broker.bind(f"s.{cid}", f"{cid}.*.{role}", mq)
        node = self.node(principal)
        self.broker.set_consumer(
            mq, lambda data, n=node, r=role: self._on_session(n, r, data)
        )

    def _on_session(self, node: _Node, role: str, data: bytes) -> None:
        """Receiver-side mediation for one (principal, cid, role) binding."""
        message = decode_message(data)
        if message.receiver != role:
            return  # own send echoed back through the second binding
        if node.monitor is not None:
            verdict = node.monitor.check(message, role)
            if not verdict.ok and node.monitor.mode == ENFORCE:
                self.dropped.append(("deliver", verdict, message))
                return
        stamped = message.with_extras(**{X_MEDIATED_IN: role})
        self.broker.push(inbox_queue(node.principal, message.cid), encode_message(stamped))

    # --- unmediated case --------------------------------------------------------

    def deliver_invitation_direct(self, entry, message: ConversationMessage) -> None:
        node = self.node(entry.principal)
        self.broker.declare_exchange(f"s.{message.cid}")
        inbox = inbox_queue(entry.principal, message.cid)
        self.broker.declare_queue(inbox)
        self.broker.bind(f"s.{message.cid}", f"{message.cid}.*.{entry.role}", inbox)
        with node.cond:
            node.invitations.append(message)
            node.cond.notify_all()

    # --- helpers ------------------------------------------------------------------

    def note_mediation_violation(self, queue: str, reason: str, message) -> None:
        self.mediation_violations.append((queue, reason, message))

    def await_accepts(self, cid: str, count: int, timeout: float = _DEFAULT_TIMEOUT) -> None:
        """Block until ``count`` roles have acknowledged their invitations."""
        deadline = time.monotonic() + timeout
        with self._ack_cond:
            while len(self._acks.get(cid, ())) < count:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(
                        f"{len(self._acks.get(cid, ()))} of {count} accepts for {cid}"
                    )
                self._ack_cond.wait(remaining)

    def close(self) -> None:
        self.broker.close()


def inbox_queue(principal: str, cid: str) -> str:
    return f"in.{principal}.{cid}"


class Endpoint:
    """One principal's handle on one conversation.

    Created unjoined; ``create`` or ``join`` binds it to a conversation id
    and role. ``recv``/``recv_async`` are aliases for ``receive`` and
    ``receive_async``.
    """

    def __init__(self, runtime: ConversationRuntime, node: _Node):
        self.runtime = runtime
        self.node = node
        self.principal = node.principal
        self.cid: Optional[str] = None
        self.role: Optional[str] = None
        self.roles: tuple = ()
        self.default_timeout = _DEFAULT_TIMEOUT
        self.mediation_violations: List[tuple] = []
        self.callback_errors: List[BaseException] = []
        self._cond = threading.Condition()
        self._buckets: Dict[str, deque] = {}
        self._callbacks: Dict[str, object] = {}
        self._stopped = False
        self._tasks: Optional[queuemod.Queue] = None
        self._dispatcher: Optional[threading.Thread] = None

    # --- session setup ------------------------------------------------------

    def create(self, protocol_name: str, config) -> str:
        """Start a conversation, inviting every configured principal.

        Returns the conversation id; this endpoint ends up joined in the
        creator's configured role.
        """
        if self.cid is not None:
            raise TransportError("endpoint already joined to a conversation")
        if isinstance(config, str):
            config = load_invitation_config(config)
        protocol = self.runtime.store.global_protocol(protocol_name)
        declared = set(protocol.roles)
        configured = config.roles()
        if declared - configured:
            raise IncompleteConfig(
                f"missing roles: {', '.join(sorted(declared - configured))}"
            )
        if configured - declared:
            raise IncompleteConfig(
                f"unknown roles: {', '.join(sorted(configured - declared))}"
            )
        own = config.entries_for_principal(self.principal)
        if not own:
            raise IncompleteConfig(f"creator {self.principal} has no invitation entry")
        creator_role = own[0].role
        cid = uuid.uuid4().hex
        self.runtime.broker.declare_exchange(f"s.{cid}")
        for entry in config.entries:
            self.runtime.node(entry.principal)  # mediation must exist before routing
        for entry in config.entries:
            invitation = ConversationMessage(
                kind=INVITATION,
                cid=cid,
                sender=creator_role,
                receiver=entry.role,
                extras=(
                    (X_ROLE, entry.role),
                    (X_PRINCIPAL, entry.principal),
                    (X_PROTOCOL_REF, entry.capability),
                    (X_INVITED_BY, self.principal),
                ),
            )
            if self.runtime.case == NONE:
                self.runtime.deliver_invitation_direct(entry, invitation)
            else:
                self.runtime.broker.publish(
                    f"out.{self.principal}",
                    f"{cid}.invite.{entry.principal}",
                    encode_message(invitation),
                )
        self.join(creator_role)
        return cid

    def join(self, role: str, principal: Optional[str] = None, timeout: Optional[float] = None) -> "Endpoint":
        """Claim the next invitation for this principal; blocks until it arrives."""
        if principal is not None and principal != self.principal:
            raise RoleMismatch(
                f"endpoint belongs to {self.principal}, cannot join as {principal}"
            )
        if self.cid is not None:
            raise TransportError("endpoint already joined to a conversation")
        deadline = time.monotonic() + (timeout if timeout is not None else self.default_timeout)
        node = self.node
        while True:
            with node.cond:
                while not node.invitations:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise Timeout(f"no invitation for {self.principal}")
                    node.cond.wait(remaining)
                invitation = node.invitations.popleft()
            if self.runtime.case != NONE and not self._audited(invitation):
                continue  # recorded; an unmediated invitation never binds
            break
        offered = invitation.extra(X_ROLE)
        if offered != role:
            raise RoleMismatch(f"invitation offers role {offered}, not {role}")
        self.cid = invitation.cid
        self.role = role
        capability = invitation.extra(X_PROTOCOL_REF)
        try:
            self.roles = self.runtime.store.local(capability).roles
        except KeyError:
            self.roles = ()
        self.runtime.broker.set_consumer(
            inbox_queue(self.principal, self.cid), self._deliver
        )
        return self

    def _audited(self, message: ConversationMessage) -> bool:
        ok = (
            message.extra(X_MEDIATED_OUT) is not None
            and message.extra(X_MEDIATED_IN) is not None
        )
        if not ok:
            self.mediation_violations.append(("invitation", message))
            self.runtime.note_mediation_violation(
                "invitation", "missing mediation tags", message
            )
        return ok

    # --- messaging -----------------------------------------------------------

    def send(self, to_role: str, label: str, payload: Optional[Dict[str, object]] = None) -> None:
        self._require_joined()
        self._check_peer(to_role)
        message = ConversationMessage(
            kind=IN_SESSION,
            cid=self.cid,
            sender=self.role,
            receiver=to_role,
            label=label,
            payload=payload_from_dict(payload),
        )
        data = encode_message(message)
        key = f"{self.cid}.{self.role}.{to_role}"
        if self.runtime.case == NONE:
            self.runtime.broker.publish(f"s.{self.cid}", key, data)
        else:
            self.runtime.broker.publish(f"out.{self.principal}", key, data)

    def receive(self, from_role: str, timeout: Optional[float] = None):
        """Next message from ``from_role`` as (label, payload dict); blocks."""
        self._require_joined()
        self._check_peer(from_role)
        deadline = time.monotonic() + (timeout if timeout is not None else self.default_timeout)
        with self._cond:
            while True:
                bucket = self._buckets.get(from_role)
                if bucket:
                    message = bucket.popleft()
                    return message.label, message.payload_dict()
                if self._stopped:
                    raise SessionEnded(f"conversation {self.cid} was stopped")
                if self._completed():
                    raise SessionEnded(f"conversation {self.cid} has completed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"nothing from {from_role}")
                self._cond.wait(remaining)

    def receive_async(self, from_role: str, callback) -> None:
        """Register a one-shot callback for the next message from ``from_role``."""
        self._require_joined()
        self._check_peer(from_role)
        with self._cond:
            if from_role in self._callbacks:
                raise DuplicateRegistration(f"a callback already waits on {from_role}")
            bucket = self._buckets.get(from_role)
            if bucket:
                message = bucket.popleft()
                self._dispatch(callback, message)
                return
            self._callbacks[from_role] = callback

    recv = receive
    recv_async = receive_async

    def stop(self) -> None:
        """Leave the conversation; idempotent. Pending receives unblock."""
        with self._cond:
            if self._stopped:
                return
            self._stopped = True
            self._callbacks.clear()
            self._cond.notify_all()
        if self.cid is not None:
            try:
                self.runtime.broker.set_consumer(
                    inbox_queue(self.principal, self.cid), None
                )
            except Exception:
                pass
        if self._tasks is not None:
            self._tasks.put(None)
            self._dispatcher.join(timeout=2)

    def status(self) -> str:
        """This endpoint's monitor session status (unknown when unmediated)."""
        monitor = self.node.monitor
        if monitor is None or self.cid is None:
            return "unknown"
        return monitor.session_status((self.cid, self.role))

    # --- delivery ----------------------------------------------------------------

    def _deliver(self, data: bytes) -> None:
        message = decode_message(data)
        if self.runtime.case != NONE:
            ok = (
                message.extra(X_MEDIATED_OUT) == message.sender
                and message.extra(X_MEDIATED_IN) == message.receiver
            )
            if not ok:
                self.mediation_violations.append(("inbox", message))
                self.runtime.note_mediation_violation(
                    inbox_queue(self.principal, self.cid),
                    "missing or forged mediation tags",
                    message,
                )
                return
        with self._cond:
            if self._stopped:
                return
            callback = self._callbacks.pop(message.sender, None)
            if callback is not None:
                self._dispatch(callback, message)
                return
            self._buckets.setdefault(message.sender, deque()).append(message)
            self._cond.notify_all()

    def _dispatch(self, callback, message: ConversationMessage) -> None:
        if self._tasks is None:
            self._tasks = queuemod.Queue()
            self._dispatcher = threading.Thread(
                target=self._run_callbacks, name=f"callbacks-{self.principal}", daemon=True
            )
            self._dispatcher.start()
        self._tasks.put((callback, message.label, message.payload_dict()))

    def _run_callbacks(self) -> None:
        while True:
            task = self._tasks.get()
            if task is None:
                return
            callback, label, payload = task
            try:
                callback(label, payload)
            except BaseException as exc:  # callbacks must not kill delivery
                self.callback_errors.append(exc)

    # --- checks ---------------------------------------------------------------------

    def _require_joined(self) -> None:
        if self._stopped:
            raise NotJoined("endpoint was stopped")
        if self.cid is None:
            raise NotJoined("endpoint has not joined a conversation")

    def _check_peer(self, role: str) -> None:
        if role == self.role:
            raise UnknownPeerRole(f"{role} is this endpoint's own role")
        if self.roles and role not in self.roles:
            raise UnknownPeerRole(f"{role} is not a role of this conversation")

    def _completed(self) -> bool:
        monitor = self.node.monitor
        if monitor is None:
            return False
        return monitor.session_status((self.cid, self.role)) == "completed"
