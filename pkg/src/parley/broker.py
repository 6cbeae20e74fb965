"""In-process message broker with topic exchanges and named queues.

Publishing routes a byte payload through an exchange's bindings to every
queue whose pattern matches the routing key (dot-separated segments; ``*``
matches one segment, ``#`` matches any tail). Delivery is synchronous: a
queue with a consumer drains in the publisher's thread, so a chain of
consumer republishes runs to completion before publish() returns. Queues
without a consumer buffer bytes until one is attached.

``wire_mode="loopback"`` additionally round-trips every published payload
through a connected socket pair, so the bytes really cross the OS socket
layer even though routing stays in-process.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from typing import Callable, Dict, List, Optional


class BrokerError(Exception):
    pass


class _Queue:
    __slots__ = ("name", "items", "consumer")

    def __init__(self, name: str):
        self.name = name
        self.items: deque = deque()
        self.consumer: Optional[Callable[[bytes], None]] = None


def _pattern_matches(pattern: List[str], key: List[str]) -> bool:
    if not pattern:
        return not key
    head = pattern[0]
    if head == "#":
        return any(_pattern_matches(pattern[1:], key[i:]) for i in range(len(key) + 1))
    if not key:
        return False
    if head == "*" or head == key[0]:
        return _pattern_matches(pattern[1:], key[1:])
    return False


class Broker:
    def __init__(self, wire_mode: str = "direct", clock=time.monotonic_ns):
        if wire_mode not in ("direct", "loopback"):
            raise BrokerError(f"unknown wire mode {wire_mode!r}")
        self.wire_mode = wire_mode
        self.clock = clock
        self._lock = threading.RLock()
        self._exchanges: Dict[str, List[tuple]] = {}  # name -> [(pattern segs, queue)]
        self._queues: Dict[str, _Queue] = {}
        self._loop_sockets: Optional[tuple] = None

    # --- topology ---------------------------------------------------------

    def declare_exchange(self, name: str) -> None:
        with self._lock:
            self._exchanges.setdefault(name, [])

    def declare_queue(self, name: str) -> None:
        with self._lock:
            self._queues.setdefault(name, _Queue(name))

    def delete_queue(self, name: str) -> None:
        with self._lock:
            self._queues.pop(name, None)
            for bindings in self._exchanges.values():
                bindings[:] = [(p, q) for p, q in bindings if q != name]

    def bind(self, exchange: str, pattern: str, queue: str) -> None:
        with self._lock:
            if exchange not in self._exchanges:
                raise BrokerError(f"unknown exchange {exchange!r}")
            if queue not in self._queues:
                raise BrokerError(f"unknown queue {queue!r}")
            entry = (tuple(pattern.split(".")), queue)
            if entry not in self._exchanges[exchange]:
                self._exchanges[exchange].append(entry)

    def unbind(self, exchange: str, pattern: str, queue: str) -> None:
        with self._lock:
            bindings = self._exchanges.get(exchange, [])
            entry = (tuple(pattern.split(".")), queue)
            bindings[:] = [b for b in bindings if b != entry]

    def set_consumer(self, queue: str, consumer: Optional[Callable[[bytes], None]]) -> None:
        """Attach or detach a consumer; attaching drains buffered items."""
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                raise BrokerError(f"unknown queue {queue!r}")
            q.consumer = consumer
            if consumer is not None:
                self._drain(q)

    # --- traffic ------------------------------------------------------------

    def publish(self, exchange: str, routing_key: str, data: bytes) -> int:
        """Route bytes to every queue bound to a matching pattern.

        Returns the number of queues that received the payload.
        """
        if self.wire_mode == "loopback":
            data = self._loopback(data)
        key = routing_key.split(".")
        with self._lock:
            bindings = self._exchanges.get(exchange)
            if bindings is None:
                raise BrokerError(f"unknown exchange {exchange!r}")
            hits = [q for pattern, q in bindings if _pattern_matches(list(pattern), key)]
            for name in hits:
                self.push(name, data)
            return len(hits)

    def push(self, queue: str, data: bytes) -> None:
        """Append bytes straight onto a queue, bypassing any exchange."""
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                raise BrokerError(f"unknown queue {queue!r}")
            q.items.append(data)
            if q.consumer is not None:
                self._drain(q)

    def pending(self, queue: str) -> int:
        with self._lock:
            q = self._queues.get(queue)
            return len(q.items) if q else 0

    def _drain(self, q: _Queue) -> None:
        while q.items and q.consumer is not None:
            data = q.items.popleft()
            q.consumer(data)

    def _loopback(self, data: bytes) -> bytes:
        with self._lock:
            if self._loop_sockets is None:
                self._loop_sockets = socket.socketpair()
            write_side, read_side = self._loop_sockets
            header = len(data).to_bytes(4, "big")
            write_side.sendall(header + data)
            out = b""
            want = 4 + len(data)
            while len(out) < want:
                out += read_side.recv(want - len(out))
            return out[4:]

    def close(self) -> None:
        with self._lock:
            if self._loop_sockets is not None:
                for sock in self._loop_sockets:
                    sock.close()
                self._loop_sockets = None
