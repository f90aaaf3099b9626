"""Bulk-synchronous parameter server.

A single server (rank 0 by default) runs in its own thread on that rank's
transport endpoint. Each round every rank pushes one gradient per key; once
all ``K`` have arrived the server sums them, applies its update rule and
bumps the key's version. ``ps_pull`` blocks until the server holds a version
newer than the one this rank last saw: the last pull, or the version that
was current when its latest push was accepted.

The server sums in the ring all-reduce's chunk order (see
:func:`~deskdp.comm.collectives.ring_order_sum`), so a parameter-server run
and an all-reduce run with the same update rule stay bitwise identical.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import threading
from typing import Callable

from deskdp.comm.collectives import TAG_PS, TAG_PS_REPLY, CommGroup, decode_tensor, encode_tensor, ring_order_sum
from deskdp.errors import ProtocolError, PSKeyError, TransportError
from deskdp.tensor import Tensor

log = logging.getLogger(__name__)

OP_PUSH = 1
OP_PULL = 2
OP_STOP = 3

ST_OK = 0
ST_KEY = 1
ST_PROTOCOL = 2

UpdateFn = Callable[[str, Tensor, Tensor], "tuple[Tensor, dict]"]


def sgd_update(lr: float) -> UpdateFn:
    def update(key, weights, grad_sum):
        w = weights.widen()
        return Tensor(w - w.dtype.type(lr) * grad_sum.widen(), weights.dtype), {}

    return update


def _pack_key(key: str) -> bytes:
    raw = key.encode()
    return struct.pack("<H", len(raw)) + raw


def _unpack_key(buf: bytes, offset: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    return buf[offset + 2 : offset + 2 + n].decode(), offset + 2 + n


class _Slot:
    def __init__(self, weights: Tensor):
        self.weights = weights
        self.version = 0
        self.meta: dict = {}
        self.pending: dict[int, Tensor] = {}
        self.waiting: list[tuple[int, int]] = []  # (rank, last seen version)


class ParameterServer:
    def __init__(self, transport, size: int, update: UpdateFn | None = None, lr: float = 0.01):
        self.transport = transport
        self.size = size
        self.update = update or sgd_update(lr)
        self.slots: dict[str, _Slot] = {}
        self.last_sum: dict[str, Tensor] = {}
        self.error: BaseException | None = None
        self._thread: threading.Thread | None = None

    def register(self, key: str, weights: Tensor) -> None:
        self.slots[key] = _Slot(weights)

    def start(self) -> "ParameterServer":
        self._thread = threading.Thread(target=self._serve, daemon=True, name="param-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            self.transport.send(self.transport.rank, TAG_PS, bytes([OP_STOP]))
            self._thread.join()

    def _reply(self, dst: int, status: int, body: bytes = b"") -> None:
        self.transport.send(dst, TAG_PS_REPLY, bytes([status]) + body)

    def _weights_reply(self, slot: _Slot) -> bytes:
        meta = json.dumps(slot.meta, sort_keys=True).encode()
        return struct.pack("<QI", slot.version, len(meta)) + meta + encode_tensor(slot.weights)

    def _serve(self) -> None:
        try:
            while True:
                try:
                    src, msg = self.transport.recv_any(TAG_PS, timeout=math.inf)
                except TransportError:
                    return
                op = msg[0]
                if op == OP_STOP:
                    return
                key, off = _unpack_key(msg, 1)
                slot = self.slots.get(key)
                if slot is None:
                    self._reply(src, ST_KEY, f"unregistered key {key!r}".encode())
                    continue
                if op == OP_PUSH:
                    self._on_push(src, key, slot, msg, off)
                elif op == OP_PULL:
                    (last,) = struct.unpack_from("<q", msg, off)
                    if slot.version > last:
                        self._reply(src, ST_OK, self._weights_reply(slot))
                    else:
                        slot.waiting.append((src, last))
        except BaseException as exc:  # surfaced to callers through .error
            self.error = exc
            log.exception("parameter server crashed")

    def _on_push(self, src: int, key: str, slot: _Slot, msg: bytes, off: int) -> None:
        if src in slot.pending:
            self._reply(src, ST_PROTOCOL, f"rank {src} pushed {key!r} twice in one round".encode())
            return
        grad, _ = decode_tensor(msg, off)
        if grad.shape != slot.weights.shape:
            self._reply(src, ST_PROTOCOL, f"gradient shape {grad.shape} != {slot.weights.shape}".encode())
            return
        slot.pending[src] = grad
        # the pusher's next pull must wait for the version this round produces
        self._reply(src, ST_OK, struct.pack("<Q", slot.version))
        if len(slot.pending) < self.size:
            return
        grads = [slot.pending[r] for r in range(self.size)]
        dtype = grads[0].dtype
        summed = Tensor(ring_order_sum([g.data.reshape(-1) for g in grads], dtype).reshape(grads[0].shape), dtype)
        slot.pending = {}
        self.last_sum[key] = summed
        slot.weights, slot.meta = self.update(key, slot.weights, summed)
        slot.version += 1
        waiting, slot.waiting = slot.waiting, []
        for rank, last in waiting:
            if slot.version > last:
                self._reply(rank, ST_OK, self._weights_reply(slot))
            else:
                slot.waiting.append((rank, last))


def _expect_ok(group: CommGroup, server: int) -> bytes:
    reply = group.transport.recv(server, TAG_PS_REPLY)
    status, body = reply[0], reply[1:]
    if status == ST_KEY:
        raise PSKeyError(body.decode())
    if status == ST_PROTOCOL:
        raise ProtocolError(body.decode())
    return body


def ps_push(group: CommGroup, key: str, grad: Tensor, server: int = 0) -> None:
    group.transport.send(server, TAG_PS, bytes([OP_PUSH]) + _pack_key(key) + encode_tensor(grad))
    (version,) = struct.unpack("<Q", _expect_ok(group, server))
    group.ps_versions[key] = max(group.ps_versions.get(key, -1), version)


def ps_pull(group: CommGroup, key: str, server: int = 0) -> tuple[Tensor, int, dict]:
    """Fresh weights, their version and the update rule's metadata."""
    last = group.ps_versions.get(key, -1)
    group.transport.send(server, TAG_PS, bytes([OP_PULL]) + _pack_key(key) + struct.pack("<q", last))
    body = _expect_ok(group, server)
    version, mlen = struct.unpack_from("<QI", body, 0)
    meta = json.loads(body[12 : 12 + mlen].decode())
    weights, _ = decode_tensor(body, 12 + mlen)
    group.ps_versions[key] = version
    return weights, version, meta


def start_server(groups_or_transport, size: int | None = None, update: UpdateFn | None = None,
                 keys: dict[str, Tensor] | None = None, lr: float = 0.01) -> ParameterServer:
    transport = groups_or_transport.transport if isinstance(groups_or_transport, CommGroup) else groups_or_transport
    server = ParameterServer(transport, size or transport.size, update, lr)
    for key, w in (keys or {}).items():
        server.register(key, w)
    return server.start()


