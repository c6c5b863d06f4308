"""At-least-once pub-sub broker.

Two delivery modes per topic:

* consumer groups: each envelope goes to one member of the group; if the
  member does not ack within ``redelivery_timeout`` it is handed out again
  (possibly to another member). A group created after publishing started
  begins at the earliest envelope still in the topic log, so actors may
  start before the learner;
* fanout: every subscriber gets every envelope published after it joined,
  plus the retained latest envelope for retain-latest topics.

:class:`Broker` is the in-process implementation. :class:`BrokerServer` and
:class:`RemoteBroker` carry the same interface over TCP using frames of
``type (1 B) | length (u32 LE) | payload``.
"""
from __future__ import annotations

import collections
import logging
import random
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

log = logging.getLogger(__name__)

DEFAULT_REDELIVERY_TIMEOUT = 2.0
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024
DEFAULT_LOG_LIMIT = 100_000  # envelopes kept per non-retained topic for late groups
RETAINED_TOPICS = ("params",)


class BusError(Exception):
    pass


class PayloadTooLarge(BusError):
    pass


@dataclass(frozen=True)
class Envelope:
    topic: str
    seq: int
    payload: bytes
    producer_id: str = ""
    producer_seq: int = 0
    attempt: int = 1


class _Topic:
    def __init__(self, name: str, retain: bool, log_limit: int):
        self.name = name
        self.retain = retain
        self.log: collections.deque[Envelope] = collections.deque(maxlen=0 if retain else log_limit)
        self.next_seq = 1
        self.producer_seqs: dict[str, int] = collections.defaultdict(int)
        self.retained: Envelope | None = None
        self.groups: dict[str, _Group] = {}
        self.fanout: dict[int, _Queue] = {}


class _Queue:
    """Pending envelopes plus in-flight ones awaiting ack."""

    def __init__(self):
        self.pending: collections.deque[Envelope] = collections.deque()
        self.inflight: dict[int, tuple[Envelope, float, int]] = {}  # seq -> (env, deadline, owner)

    def take(self, now: float, timeout: float, owner: int) -> Envelope | None:
        expired = [s for s, (_, deadline, _) in self.inflight.items() if deadline <= now]
        if expired:
            seq = min(expired)
            env, _, _ = self.inflight.pop(seq)
            env = Envelope(env.topic, env.seq, env.payload, env.producer_id, env.producer_seq,
                           env.attempt + 1)
        elif self.pending:
            env = self.pending.popleft()
        else:
            return None
        self.inflight[env.seq] = (env, now + timeout, owner)
        return env

    def ack(self, seq: int, owner: int) -> bool:
        entry = self.inflight.get(seq)
        if entry is None or entry[2] != owner:
            return False
        del self.inflight[seq]
        return True


class _Group(_Queue):
    def __init__(self, group_id: str):
        super().__init__()
        self.group_id = group_id


class Subscription:
    """Delivery stream handed out by :meth:`Broker.subscribe`."""

    def __init__(self, broker: Broker, topic: str, queue: _Queue, sub_id: int, name: str,
                 fanout: bool):
        self.broker = broker
        self.topic = topic
        self.name = name
        self.fanout = fanout
        self.closed = False
        self._queue = queue
        self._id = sub_id

    def poll(self, timeout: float = 0.0) -> Envelope | None:
        return self.broker._poll(self, timeout)

    def ack(self, envelope: Envelope | int) -> bool:
        seq = envelope if isinstance(envelope, int) else envelope.seq
        return self.broker._ack(self, seq)

    def close(self) -> None:
        """Leave without acking; in-flight envelopes are redelivered after the timeout."""
        self.broker._close(self)

    def __iter__(self):
        while not self.closed:
            env = self.poll()
            if env is None:
                return
            yield env


class Broker:
    """In-process broker; all state sits behind one lock.

    ``clock`` is injectable so redelivery can be driven deterministically.
    ``drop_ack_rate`` makes a fraction of acks get lost (the envelope stays
    in flight and is redelivered), which is how tests induce duplicates.
    """

    def __init__(self, redelivery_timeout: float = DEFAULT_REDELIVERY_TIMEOUT,
                 max_payload: int = DEFAULT_MAX_PAYLOAD, retained_topics=RETAINED_TOPICS,
                 clock=time.monotonic, drop_ack_rate: float = 0.0, seed: int | None = None,
                 log_limit: int = DEFAULT_LOG_LIMIT):
        self.redelivery_timeout = redelivery_timeout
        self.log_limit = log_limit
        self.max_payload = max_payload
        self.retained_topics = frozenset(retained_topics)
        self.clock = clock
        self.drop_ack_rate = drop_ack_rate
        self._rng = random.Random(seed)
        self._topics: dict[str, _Topic] = {}
        self._cond = threading.Condition()
        self._next_sub = 1
        self.stats = collections.Counter()

    def _topic(self, name: str) -> _Topic:
        t = self._topics.get(name)
        if t is None:
            t = self._topics[name] = _Topic(name, name in self.retained_topics, self.log_limit)
        return t

    def publish(self, topic: str, payload: bytes, producer: str = "") -> int:
        payload = bytes(payload)
        if len(payload) > self.max_payload:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {self.max_payload}")
        with self._cond:
            t = self._topic(topic)
            seq = t.next_seq
            t.next_seq += 1
            t.producer_seqs[producer] += 1
            env = Envelope(topic, seq, payload, producer, t.producer_seqs[producer])
            if t.retain:
                t.retained = env
            t.log.append(env)
            for g in t.groups.values():
                g.pending.append(env)
            for q in t.fanout.values():
                q.pending.append(env)
            self.stats["published"] += 1
            self._cond.notify_all()
        return seq

    def subscribe(self, topic: str, group: str | None = None, *, fanout: bool = False,
                  member: str = "") -> Subscription:
        """Join consumer group ``group`` (default ``"default"``) or, with ``fanout``, a private stream."""
        with self._cond:
            t = self._topic(topic)
            sub_id = self._next_sub
            self._next_sub += 1
            if fanout:
                q = _Queue()
                if t.retained is not None:
                    q.pending.append(t.retained)
                t.fanout[sub_id] = q
            else:
                gid = group or "default"
                q = t.groups.get(gid)
                if q is None:
                    q = t.groups[gid] = _Group(gid)
                    q.pending.extend(t.log)
            return Subscription(self, topic, q, sub_id, member or f"sub-{sub_id}", fanout)

    def _poll(self, sub: Subscription, timeout: float) -> Envelope | None:
        deadline = None
        with self._cond:
            while True:
                if sub.closed:
                    return None
                env = sub._queue.take(self.clock(), self.redelivery_timeout, sub._id)
                if env is not None:
                    self.stats["delivered"] += 1
                    if env.attempt > 1:
                        self.stats["redelivered"] += 1
                    return env
                if timeout <= 0:
                    return None
                now = time.monotonic()
                if deadline is None:
                    deadline = now + timeout
                if now >= deadline:
                    return None
                self._cond.wait(min(deadline - now, 0.05))

    def _ack(self, sub: Subscription, seq: int) -> bool:
        with self._cond:
            if self.drop_ack_rate and self._rng.random() < self.drop_ack_rate:
                self.stats["acks_dropped"] += 1
                return True  # the consumer believes it acked
            if not sub._queue.ack(seq, sub._id):
                log.warning("ack for unknown seq %d on topic %r ignored", seq, sub.topic)
                self.stats["unknown_acks"] += 1
                return False
            self.stats["acked"] += 1
            return True

    def _close(self, sub: Subscription) -> None:
        with self._cond:
            sub.closed = True
            t = self._topics[sub.topic]
            t.fanout.pop(sub._id, None)
            # group in-flight entries of this member are left to time out

    def unacked(self, topic: str) -> int:
        with self._cond:
            t = self._topic(topic)
            queues = list(t.groups.values()) + list(t.fanout.values())
            return sum(len(q.pending) + len(q.inflight) for q in queues)


# --- TCP transport ------------------------------------------------------

MSG_PUBLISH = 1
MSG_SUBSCRIBE = 2
MSG_POLL = 3
MSG_ACK = 4
MSG_CLOSE = 5
MSG_OK = 10
MSG_ENVELOPE = 11
MSG_EMPTY = 12
MSG_ERROR = 13

_FRAME = struct.Struct("<BI")


def write_frame(sock: socket.socket, kind: int, payload: bytes = b"") -> None:
    sock.sendall(_FRAME.pack(kind, len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_len: int = DEFAULT_MAX_PAYLOAD + 1024) -> tuple[int, bytes]:
    kind, n = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
    if n > max_len:
        raise BusError(f"frame of {n} bytes exceeds limit")
    return kind, _recv_exact(sock, n)


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off:off + n].decode(), off + n


def encode_envelope(env: Envelope) -> bytes:
    return (struct.pack("<QQI", env.seq, env.producer_seq, env.attempt) + _pack_str(env.topic)
            + _pack_str(env.producer_id) + env.payload)


def decode_envelope(buf: bytes) -> Envelope:
    seq, pseq, attempt = struct.unpack_from("<QQI", buf, 0)
    topic, off = _unpack_str(buf, 20)
    producer, off = _unpack_str(buf, off)
    return Envelope(topic, seq, buf[off:], producer, pseq, attempt)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        broker: Broker = self.server.broker
        subs: dict[int, Subscription] = {}
        sock = self.request
        try:
            while True:
                try:
                    kind, body = read_frame(sock)
                except (ConnectionError, OSError):
                    return
                try:
                    self._dispatch(broker, subs, sock, kind, body)
                except BusError as exc:
                    write_frame(sock, MSG_ERROR, str(exc).encode())
        finally:
            for s in subs.values():
                s.close()

    @staticmethod
    def _dispatch(broker, subs, sock, kind, body):
        if kind == MSG_PUBLISH:
            topic, off = _unpack_str(body, 0)
            producer, off = _unpack_str(body, off)
            seq = broker.publish(topic, body[off:], producer=producer)
            write_frame(sock, MSG_OK, struct.pack("<Q", seq))
        elif kind == MSG_SUBSCRIBE:
            fanout = bool(body[0])
            topic, off = _unpack_str(body, 1)
            group, off = _unpack_str(body, off)
            member, off = _unpack_str(body, off)
            sub = broker.subscribe(topic, group or None, fanout=fanout, member=member)
            subs[sub._id] = sub
            write_frame(sock, MSG_OK, struct.pack("<Q", sub._id))
        elif kind == MSG_POLL:
            sub_id, timeout_ms = struct.unpack("<QI", body)
            env = subs[sub_id].poll(timeout_ms / 1000.0)
            if env is None:
                write_frame(sock, MSG_EMPTY)
            else:
                write_frame(sock, MSG_ENVELOPE, encode_envelope(env))
        elif kind == MSG_ACK:
            sub_id, seq = struct.unpack("<QQ", body)
            ok = subs[sub_id].ack(seq)
            write_frame(sock, MSG_OK, bytes([ok]))
        elif kind == MSG_CLOSE:
            (sub_id,) = struct.unpack("<Q", body)
            sub = subs.pop(sub_id, None)
            if sub is not None:
                sub.close()
            write_frame(sock, MSG_OK)
        else:
            raise BusError(f"unknown frame type {kind}")


class BrokerServer(socketserver.ThreadingTCPServer):
    """Serves a :class:`Broker` over TCP; one thread per client connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address=("127.0.0.1", 0), broker: Broker | None = None):
        super().__init__(address, _Handler)
        self.broker = broker or Broker()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> BrokerServer:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"broker address must look like host:port, got {address!r}")
    return host, int(port)


class RemoteSubscription:
    def __init__(self, client: RemoteBroker, sub_id: int, topic: str):
        self.client = client
        self.sub_id = sub_id
        self.topic = topic

    def poll(self, timeout: float = 0.0) -> Envelope | None:
        kind, body = self.client._call(MSG_POLL, struct.pack("<QI", self.sub_id, int(timeout * 1000)))
        return decode_envelope(body) if kind == MSG_ENVELOPE else None

    def ack(self, envelope: Envelope | int) -> bool:
        seq = envelope if isinstance(envelope, int) else envelope.seq
        _, body = self.client._call(MSG_ACK, struct.pack("<QQ", self.sub_id, seq))
        return bool(body[0])

    def close(self) -> None:
        self.client._call(MSG_CLOSE, struct.pack("<Q", self.sub_id))


class RemoteBroker:
    """TCP client exposing ``publish`` and ``subscribe`` like :class:`Broker`."""

    def __init__(self, address: str, connect_timeout: float = 5.0):
        self.address = parse_address(address)
        self.connect_timeout = connect_timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.connect_timeout)
            self._sock.settimeout(None)
        return self._sock

    def _call(self, kind: int, payload: bytes) -> tuple[int, bytes]:
        with self._lock:
            try:
                sock = self._connect()
                write_frame(sock, kind, payload)
                reply, body = read_frame(sock)
            except OSError:
                self.close()
                raise
        if reply == MSG_ERROR:
            raise BusError(body.decode(errors="replace"))
        return reply, body

    def publish(self, topic: str, payload: bytes, producer: str = "") -> int:
        _, body = self._call(MSG_PUBLISH, _pack_str(topic) + _pack_str(producer) + bytes(payload))
        return struct.unpack("<Q", body)[0]

    def subscribe(self, topic: str, group: str | None = None, *, fanout: bool = False,
                  member: str = "") -> RemoteSubscription:
        body = bytes([fanout]) + _pack_str(topic) + _pack_str(group or "") + _pack_str(member)
        _, reply = self._call(MSG_SUBSCRIBE, body)
        return RemoteSubscription(self, struct.unpack("<Q", reply)[0], topic)

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
