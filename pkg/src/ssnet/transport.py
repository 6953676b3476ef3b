"""Message transports: an in-process simulator and a localhost/LAN TCP mesh.

Both expose the same two calls: send(dst, phase, payload) and
recv(src, phase) -> payload. Channels are point to point and FIFO, receives
are addressed (the caller names the peer and the expected phase), and a
phase tag that does not match the receiver's schedule position raises
ScheduleDivergence. The simulator keeps a per-channel transcript so runs can
be compared byte for byte; party threads may interleave freely without
affecting it because each channel is single-writer.

TCP parties connect in ascending index order (each party dials every lower
index, accepts every higher one, and accepts the mask source, index 0, when
told to expect it). Every connection opens with a HELLO frame carrying the
protocol version, the scheme, and the model and schedule digests; any
mismatch aborts the run before a single share moves.
"""

import hashlib
import queue
import socket
import struct
import threading
import time

from .wire import (
    FRAME_HEADER_SIZE,
    MAGIC,
    Phase,
    ProtocolError,
    decode_frame,
    decode_hello,
    encode_frame,
    encode_hello,
)


class PartyTimeout(ProtocolError):
    pass


class ScheduleDivergence(ProtocolError):
    pass


class HandshakeError(Exception):
    """Configuration disagreement between peers (version, scheme, digests)."""


class SimHub:
    """Shared state for one simulated run: queues, transcript, metrics."""

    def __init__(self, ranks, metrics=None):
        self.ranks = tuple(ranks)
        self.metrics = metrics
        self._queues = {(s, d): queue.SimpleQueue()
                        for s in self.ranks for d in self.ranks if s != d}
        self._transcript = {key: [] for key in self._queues}
        self._lock = threading.Lock()

    def transport(self, rank):
        return SimTransport(self, rank)

    def _push(self, src, dst, frame):
        with self._lock:
            self._transcript[(src, dst)].append(frame)
        self._queues[(src, dst)].put(frame)

    def canonical_transcript(self) -> bytes:
        """Deterministic serialization: channels in sorted order, frames in
        send order. Identical seeds must yield identical bytes."""
        parts = []
        with self._lock:
            for key in sorted(self._transcript):
                frames = self._transcript[key]
                parts.append(struct.pack("<HHI", key[0], key[1], len(frames)))
                parts.extend(frames)
        return b"".join(parts)

    def transcript_digest(self) -> str:
        return hashlib.sha256(self.canonical_transcript()).hexdigest()

    def channel_frames(self, src, dst):
        with self._lock:
            return list(self._transcript[(src, dst)])


class SimTransport:
    def __init__(self, hub, rank):
        self.hub = hub
        self.rank = rank

    def send(self, dst, phase, payload: bytes, elements=0):
        frame = encode_frame(self.rank, phase, payload)
        self.hub._push(self.rank, dst, frame)
        if self.hub.metrics is not None:
            self.hub.metrics.on_send(self.rank, len(frame), elements)

    def recv(self, src, phase, elements=0) -> bytes:
        frame = self.hub._queues[(src, self.rank)].get()
        sender, got, payload = decode_frame(frame)
        if sender != src:
            raise ProtocolError(f"frame from {sender} on channel of {src}")
        if got != phase:
            raise ScheduleDivergence(
                f"party {self.rank} expected {Phase(phase).name} from {src}, "
                f"got {got.name}")
        if self.hub.metrics is not None:
            self.hub.metrics.on_recv(self.rank, len(frame), elements)
        return payload

    def close(self):
        pass


def _recv_exact(sock, count):
    buf = b""
    while len(buf) < count:
        try:
            chunk = sock.recv(count - len(buf))
        except socket.timeout:
            raise PartyTimeout("blocking receive timed out") from None
        if not chunk:
            raise ProtocolError("peer closed the connection")
        buf += chunk
    return buf


def _read_frame(sock):
    head = _recv_exact(sock, FRAME_HEADER_SIZE)
    magic, sender, phase, plen = struct.unpack("<4sHHI", head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    payload = _recv_exact(sock, plen) if plen else b""
    return decode_frame(head + payload)


def _digest32(value) -> bytes:
    """Accept a 32-byte digest or its 64-char hex form."""
    if isinstance(value, str):
        value = bytes.fromhex(value)
    if len(value) != 32:
        raise ValueError(f"digest must be 32 bytes, got {len(value)}")
    return value


class TcpTransport:
    """One party's end of a fully connected TCP mesh."""

    def __init__(self, rank, socks, metrics=None):
        self.rank = rank
        self._socks = socks
        self.metrics = metrics

    @classmethod
    def establish(cls, rank, peers, k, n, model_digest, schedule_digest,
                  metrics=None, expect_source=False, timeout=30.0,
                  dial_deadline=15.0):
        """Wire up the mesh for party `rank` (1..n) or the source (0).

        peers lists (host, port) for ranks 1..n. The hello carries
        (version, k, n, rank, model digest, schedule digest); both sides
        validate and raise HandshakeError on any difference.
        """
        model_digest = _digest32(model_digest)
        schedule_digest = _digest32(schedule_digest)
        my_hello = encode_hello(k, n, rank, model_digest, schedule_digest)

        def validate(payload, expected_rank=None):
            version, hk, hn, sender, mdig, sdig = decode_hello(payload)
            from .wire import PROTOCOL_VERSION
            if version != PROTOCOL_VERSION:
                raise HandshakeError(f"protocol version {version} != {PROTOCOL_VERSION}")
            if (hk, hn) != (k, n):
                raise HandshakeError(f"scheme ({hk},{hn}) != ({k},{n})")
            if mdig != model_digest:
                raise HandshakeError("model digest mismatch")
            if sdig != schedule_digest:
                raise HandshakeError("schedule digest mismatch")
            if expected_rank is not None and sender != expected_rank:
                raise HandshakeError(f"peer claims rank {sender}, expected {expected_rank}")
            return sender

        socks = {}

        def dial(peer_rank):
            host, port = peers[peer_rank - 1]
            deadline = time.monotonic() + dial_deadline
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise PartyTimeout(f"cannot reach party {peer_rank}") from None
                    time.sleep(0.05)
            sock.settimeout(timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(encode_frame(rank, Phase.HELLO, my_hello))
            sender, phase, payload = _read_frame(sock)
            if phase != Phase.HELLO:
                raise ProtocolError("expected hello")
            validate(payload, expected_rank=peer_rank)
            socks[peer_rank] = sock

        if rank == 0:
            for j in range(1, n + 1):
                dial(j)
            return cls(rank, socks, metrics)

        host, port = peers[rank - 1]
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(n + 1)
        server.settimeout(timeout)
        try:
            # ascending order: dial every lower rank first
            for j in range(1, rank):
                dial(j)
            expected = (n - rank) + (1 if expect_source else 0)
            for _ in range(expected):
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    raise PartyTimeout("timed out waiting for peers") from None
                conn.settimeout(timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sender, phase, payload = _read_frame(conn)
                if phase != Phase.HELLO:
                    raise ProtocolError("expected hello")
                got = validate(payload)
                conn.sendall(encode_frame(rank, Phase.HELLO, my_hello))
                socks[got] = conn
        finally:
            server.close()
        return cls(rank, socks, metrics)

    def send(self, dst, phase, payload: bytes, elements=0):
        frame = encode_frame(self.rank, phase, payload)
        self._socks[dst].sendall(frame)
        if self.metrics is not None:
            self.metrics.on_send(self.rank, len(frame), elements)

    def recv(self, src, phase, elements=0) -> bytes:
        sender, got, payload = _read_frame(self._socks[src])
        if sender != src:
            raise ProtocolError(f"frame from {sender} on channel of {src}")
        if got != phase:
            raise ScheduleDivergence(
                f"party {self.rank} expected {Phase(phase).name} from {src}, "
                f"got {got.name}")
        if self.metrics is not None:
            self.metrics.on_recv(self.rank, len(payload) + FRAME_HEADER_SIZE, elements)
        return payload

    def close(self):
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._socks.clear()
