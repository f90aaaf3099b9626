"""Reliable, ordered point-to-point channels between ranks.

Two implementations share one interface:

* :class:`InProcTransport`: message queues between worker threads.
* :class:`SocketTransport`: TCP over localhost. Every message is one frame::

      [u32 little-endian payload length][u16 little-endian tag][payload]

  Right after connecting, the dialling side sends a hello frame with tag
  ``0xFFFF`` whose payload is its rank as a u32 little-endian integer.

Delivery is FIFO per (src, dst, tag). ``recv`` blocks until a matching
message arrives, the peer disconnects, or the timeout expires.
"""

from __future__ import annotations

import math
import socket
import struct
import threading
from collections import deque

from deskdp.errors import TransportError

FRAME_HEADER = struct.Struct("<IH")
HELLO_TAG = 0xFFFF
MAX_TAG = 0xFFFE
DEFAULT_TIMEOUT = 120.0


def encode_frame(tag: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(len(payload), tag) + payload


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """Next ``(tag, payload)`` from ``sock``; None on a clean EOF."""
    header = _read_exact(sock, FRAME_HEADER.size)
    if header is None:
        return None
    length, tag = FRAME_HEADER.unpack(header)
    payload = _read_exact(sock, length) if length else b""
    if payload is None:
        raise TransportError("connection closed mid-frame")
    return tag, payload


class _Inbox:
    def __init__(self):
        self._cond = threading.Condition()
        self._queues: dict[int, deque] = {}
        self._gone: set[int] = set()
        self._closed = False

    def put(self, src: int, tag: int, payload: bytes) -> None:
        with self._cond:
            self._queues.setdefault(tag, deque()).append((src, payload))
            self._cond.notify_all()

    def disconnect(self, src: int) -> None:
        with self._cond:
            self._gone.add(src)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self, src: int | None, tag: int, timeout: float) -> tuple[int, bytes]:
        def find():
            q = self._queues.get(tag)
            if not q:
                return None
            if src is None:
                return q.popleft()
            for k, (s, payload) in enumerate(q):
                if s == src:
                    del q[k]
                    return s, payload
            return None

        wait = None if math.isinf(timeout) else timeout
        with self._cond:
            while True:
                hit = find()
                if hit is not None:
                    return hit
                if self._closed:
                    raise TransportError("transport closed")
                if src is not None and src in self._gone:
                    raise TransportError(f"peer {src} disconnected")
                if not self._cond.wait(wait):
                    who = "any peer" if src is None else f"rank {src}"
                    raise TransportError(f"timed out after {timeout}s waiting for {who} on tag {tag}")


class Transport:
    """Common surface: ``send``, ``recv``, ``recv_any``, ``close``."""

    def __init__(self, rank: int, size: int, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._inbox = _Inbox()

    def _check_rank(self, r: int, what: str) -> None:
        if not isinstance(r, int) or not 0 <= r < self.size:
            raise TransportError(f"invalid {what} rank {r!r} (group size {self.size})")

    @staticmethod
    def _check_tag(tag: int) -> None:
        if not 0 <= tag <= MAX_TAG:
            raise TransportError(f"tag {tag} outside 0..{MAX_TAG}")

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        self._check_rank(src, "source")
        self._check_tag(tag)
        return self._inbox.get(src, tag, self.timeout if timeout is None else timeout)[1]

    def recv_any(self, tag: int, timeout: float | None = None) -> tuple[int, bytes]:
        self._check_tag(tag)
        return self._inbox.get(None, tag, self.timeout if timeout is None else timeout)

    def close(self) -> None:
        self._inbox.close()


class InProcTransport(Transport):
    def __init__(self, hub: "InProcHub", rank: int):
        super().__init__(rank, hub.size, hub.timeout)
        self._hub = hub

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check_rank(dst, "destination")
        self._check_tag(tag)
        peer = self._hub.endpoints[dst]
        if peer._inbox._closed:
            raise TransportError(f"peer {dst} disconnected")
        peer._inbox.put(self.rank, tag, bytes(payload))

    def close(self) -> None:
        super().close()
        for ep in self._hub.endpoints:
            if ep is not self:
                ep._inbox.disconnect(self.rank)


class InProcHub:
    def __init__(self, size: int, timeout: float = DEFAULT_TIMEOUT):
        if size < 1:
            raise TransportError("group size must be >= 1")
        self.size = size
        self.timeout = timeout
        self.endpoints = [InProcTransport(self, r) for r in range(size)]


class SocketTransport(Transport):
    """Framed TCP channels; ``socks`` maps peer rank to a connected socket."""

    def __init__(self, rank: int, size: int, socks: dict[int, socket.socket], timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, size, timeout)
        self._socks = socks
        self._locks = {r: threading.Lock() for r in socks}
        self._readers = []
        for peer, sock in socks.items():
            t = threading.Thread(target=self._read_loop, args=(peer, sock), daemon=True,
                                 name=f"sock-reader-{rank}<-{peer}")
            t.start()
            self._readers.append(t)

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    break
                tag, payload = frame
                self._inbox.put(peer, tag, payload)
        except (OSError, TransportError):
            pass
        finally:
            self._inbox.disconnect(peer)

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check_rank(dst, "destination")
        self._check_tag(tag)
        if dst == self.rank:
            self._inbox.put(self.rank, tag, bytes(payload))
            return
        try:
            with self._locks[dst]:
                self._socks[dst].sendall(encode_frame(tag, payload))
        except OSError as exc:
            raise TransportError(f"send to rank {dst} failed: {exc}") from exc

    def close(self) -> None:
        super().close()
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _hello(rank: int) -> bytes:
    return encode_frame(HELLO_TAG, struct.pack("<I", rank))


def make_socket_transports(size: int, host: str = "127.0.0.1", timeout: float = DEFAULT_TIMEOUT) -> list[SocketTransport]:
    """Fully connected localhost mesh for ``size`` ranks living in this process."""
    listeners = []
    for _ in range(size):
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((host, 0))
        ls.listen(size)
        listeners.append(ls)
    socks: list[dict[int, socket.socket]] = [{} for _ in range(size)]
    try:
        for lo in range(size):
            for hi in range(lo + 1, size):
                dial = socket.create_connection(listeners[lo].getsockname())
                dial.sendall(_hello(hi))
                acc, _ = listeners[lo].accept()
                frame = read_frame(acc)
                if frame is None or frame[0] != HELLO_TAG:
                    raise TransportError("bad handshake")
                (peer,) = struct.unpack("<I", frame[1])
                for s in (dial, acc):
                    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                socks[lo][peer] = acc
                socks[hi][lo] = dial
    finally:
        for ls in listeners:
            ls.close()
    return [SocketTransport(r, size, socks[r], timeout) for r in range(size)]


def make_transports(size: int, kind: str = "inproc", timeout: float = DEFAULT_TIMEOUT) -> list[Transport]:
    if kind == "inproc":
        return InProcHub(size, timeout).endpoints
    if kind == "socket":
        return make_socket_transports(size, timeout=timeout)
    raise TransportError(f"unknown transport {kind!r}")
