"""Collectives over a :class:`~deskdp.comm.transport.Transport`.

Every collective message starts with a header carrying the group's collective
sequence number and an op code. Ranks that call collectives in different
orders therefore fail with :class:`ProtocolError` instead of deadlocking or
silently mixing buffers.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from deskdp.errors import CollectiveError, ProtocolError
from deskdp.tensor import DType, Tensor, from_compute

TAG_RING = 1
TAG_BCAST = 2
TAG_PS = 3
TAG_PS_REPLY = 4

OP_RING_RS = 1
OP_RING_AG = 2
OP_BCAST = 3

_HDR = struct.Struct("<IBQ")  # seq, op, total element count
_DTYPE_CODES = {DType.FP32: 0, DType.FP16: 1, DType.FP64: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def encode_tensor(t: Tensor) -> bytes:
    dims = t.shape
    head = struct.pack("<BB", _DTYPE_CODES[t.dtype], len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + t.data.astype(t.dtype.storage.newbyteorder("<"), copy=False).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(dims)) if dims else 1
    nbytes = n * dtype.width
    arr = np.frombuffer(buf, dtype=dtype.storage.newbyteorder("<"), count=n, offset=offset).reshape(dims)
    return Tensor(arr.astype(dtype.storage), dtype), offset + nbytes


class CommGroup:
    """One rank's view of a worker group."""

    def __init__(self, transport, epoch: int = 0):
        self.transport = transport
        self.rank = transport.rank
        self.size = transport.size
        self.seq = 0
        self.epoch = epoch
        self.ps_versions: dict[str, int] = {}

    @property
    def membership(self) -> tuple[int, int, int, int]:
        return (id(self.transport), self.rank, self.size, self.epoch)

    def next_seq(self) -> int:
        s = self.seq
        self.seq += 1
        return s

    def allreduce(self, t: Tensor) -> Tensor:
        return ring_allreduce(self, t)

    def close(self) -> None:
        self.transport.close()


def make_groups(size: int, transport: str = "inproc", timeout: float | None = None) -> list[CommGroup]:
    from deskdp.comm.transport import DEFAULT_TIMEOUT, make_transports

    return [CommGroup(tr) for tr in make_transports(size, transport, timeout or DEFAULT_TIMEOUT)]


def _check_header(buf: bytes, seq: int, op: int, total: int, src: int) -> memoryview:
    got_seq, got_op, got_total = _HDR.unpack_from(buf, 0)
    if got_seq != seq or got_op != op:
        raise ProtocolError(f"rank {src} sent collective #{got_seq} op {got_op}, expected #{seq} op {op}")
    if got_total != total:
        raise CollectiveError(f"rank {src} supplied {got_total} elements, this rank has {total}")
    return memoryview(buf)[_HDR.size :]


def chunk_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """Split ``n`` elements into ``k`` contiguous chunks; the first ``n % k`` get one extra."""
    base, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def _add(a: np.ndarray, b: np.ndarray, dtype: DType) -> np.ndarray:
    return from_compute(a.astype(dtype.compute) + b.astype(dtype.compute), dtype).data


def ring_order_sum(buffers: list[np.ndarray], dtype: DType) -> np.ndarray:
    """Elementwise sum of per-rank flat buffers using the ring schedule's order.

    Chunk ``c`` is folded left to right starting at rank ``c``:
    ``((x_c + x_{c+1}) + x_{c+2}) + ...``. This is exactly what
    :func:`ring_allreduce` computes, so a central reducer using it produces
    bitwise-identical sums.
    """
    k = len(buffers)
    out = np.empty_like(buffers[0])
    for c, (lo, hi) in enumerate(chunk_bounds(len(buffers[0]), k)):
        acc = buffers[c][lo:hi]
        for j in range(1, k):
            acc = _add(acc, buffers[(c + j) % k][lo:hi], dtype)
        out[lo:hi] = acc
    return out


def ring_allreduce(group: CommGroup, t: Tensor) -> Tensor:
    """Elementwise sum across the group via reduce-scatter then all-gather.

    Each phase takes ``K - 1`` steps; every rank sends ``2 (K-1)/K`` of the
    payload in total. The result is bitwise identical on all ranks.
    """
    k, r = group.size, group.rank
    seq = group.next_seq()
    if k == 1:
        return Tensor(t.data.copy(), t.dtype)
    tr = group.transport
    flat = t.data.reshape(-1).copy()
    n = flat.size
    bounds = chunk_bounds(n, k)
    chunks = [flat[lo:hi].copy() for lo, hi in bounds]
    nxt, prv = (r + 1) % k, (r - 1) % k
    storage = t.dtype.storage.newbyteorder("<")

    def send(op, idx):
        tr.send(nxt, TAG_RING, _HDR.pack(seq, op, n) + chunks[idx].astype(storage, copy=False).tobytes())

    def recv(op, idx):
        body = _check_header(tr.recv(prv, TAG_RING), seq, op, n, prv)
        got = np.frombuffer(body, dtype=storage)
        if got.size != chunks[idx].size:
            raise CollectiveError(f"chunk {idx} size {got.size} != {chunks[idx].size}")
        return got.astype(t.dtype.storage)

    for step in range(k - 1):
        send(OP_RING_RS, (r - step) % k)
        idx = (r - step - 1) % k
        chunks[idx] = _add(recv(OP_RING_RS, idx), chunks[idx], t.dtype)
    for step in range(k - 1):
        send(OP_RING_AG, (r + 1 - step) % k)
        idx = (r - step) % k
        chunks[idx] = recv(OP_RING_AG, idx)
    return Tensor(np.concatenate(chunks).reshape(t.shape), t.dtype)


def broadcast(group: CommGroup, root: int, t: Tensor | None) -> Tensor:
    """Every rank returns root's tensor, bitwise."""
    if not isinstance(root, int) or not 0 <= root < group.size:
        raise CollectiveError(f"broadcast root {root!r} out of range for group of {group.size}")
    seq = group.next_seq()
    tr = group.transport
    if group.rank == root:
        if t is None:
            raise CollectiveError("root must supply a tensor")
        payload = _HDR.pack(seq, OP_BCAST, t.numel) + encode_tensor(t)
        for dst in range(group.size):
            if dst != root:
                tr.send(dst, TAG_BCAST, payload)
        return Tensor(t.data.copy(), t.dtype)
    buf = tr.recv(root, TAG_BCAST)
    got_seq, got_op, _ = _HDR.unpack_from(buf, 0)
    if got_seq != seq or got_op != OP_BCAST:
        raise ProtocolError(f"root sent collective #{got_seq} op {got_op}, expected #{seq} op {OP_BCAST}")
    out, _ = decode_tensor(buf, _HDR.size)
    return out


def digest(t: Tensor) -> str:
    return hashlib.sha256(t.dtype.value.encode() + repr(t.shape).encode() + t.data.tobytes()).hexdigest()
