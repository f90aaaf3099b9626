import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdp.comm import (GBIT, MB, CostModel, broadcast, digest, make_groups, ps_pull, ps_push, ring_allreduce,
                         simulate_step_time, start_server)
from deskdp.comm.collectives import CommGroup, chunk_bounds
from deskdp.comm.ps import sgd_update
from deskdp.comm.transport import FRAME_HEADER, SocketTransport, encode_frame, make_transports, read_frame
from deskdp.errors import CollectiveError, ParameterError, ProtocolError, PSKeyError, TransportError
from deskdp.tensor import FP16, FP32, FP64, Tensor

from conftest import run_ranks

TRANSPORTS = ["inproc", "socket"]


def allreduce_all(k, bufs, kind="inproc", dtype=FP32):
    groups = make_groups(k, kind, timeout=20)
    try:
        return run_ranks(k, lambda r: ring_allreduce(groups[r], Tensor(bufs[r], dtype)))
    finally:
        for g in groups:
            g.close()


# ---------------------------------------------------------------- transport


@pytest.mark.parametrize("kind", TRANSPORTS)
def test_send_recv_roundtrip(kind):
    a, b = make_transports(2, kind, timeout=5)
    try:
        a.send(1, 7, b"hello")
        assert b.recv(0, 7) == b"hello"
        a.send(0, 7, b"self")
        assert a.recv(0, 7) == b"self"
    finally:
        a.close()
        b.close()


@pytest.mark.parametrize("kind", TRANSPORTS)
def test_per_tag_order_is_preserved(kind):
    a, b = make_transports(2, kind, timeout=5)
    try:
        for i in range(50):
            a.send(1, 1 + i % 2, struct.pack("<I", i))
        odd = [struct.unpack("<I", b.recv(0, 2))[0] for _ in range(25)]
        even = [struct.unpack("<I", b.recv(0, 1))[0] for _ in range(25)]
        assert even == list(range(0, 50, 2)) and odd == list(range(1, 50, 2))
    finally:
        a.close()
        b.close()


@pytest.mark.parametrize("kind", TRANSPORTS)
def test_transport_errors(kind):
    a, b = make_transports(2, kind, timeout=0.2)
    try:
        with pytest.raises(TransportError):
            a.recv(5, 1)
        with pytest.raises(TransportError):
            a.send(-1, 1, b"")
        with pytest.raises(TransportError):
            a.recv(1, 1)  # timeout
        b.close()
        with pytest.raises(TransportError):
            a.recv(1, 1, timeout=5)  # disconnected peer, not a 5 s wait
    finally:
        a.close()
        b.close()


def test_wire_format_interoperates_with_raw_sockets():
    ours, theirs = socket.socketpair()
    tr = SocketTransport(0, 2, {1: ours}, timeout=5)
    try:
        payload = b"\x00\x01abc"
        theirs.sendall(struct.pack("<IH", len(payload), 42) + payload)
        assert tr.recv(1, 42) == payload
        tr.send(1, 9, b"xyz")
        head = theirs.recv(FRAME_HEADER.size, socket.MSG_WAITALL)
        assert struct.unpack("<IH", head) == (3, 9)
        assert theirs.recv(3, socket.MSG_WAITALL) == b"xyz"
    finally:
        tr.close()
        theirs.close()


def test_frame_codec():
    a, b = socket.socketpair()
    a.sendall(encode_frame(3, b"payload") + encode_frame(4, b""))
    assert read_frame(b) == (3, b"payload")
    assert read_frame(b) == (4, b"")
    a.close()
    assert read_frame(b) is None
    b.close()


# ---------------------------------------------------------------- ring all-reduce


def test_chunk_bounds_cover_everything():
    assert chunk_bounds(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    assert chunk_bounds(2, 3) == [(0, 1), (1, 2), (2, 2)]


def test_allreduce_k3_example():
    outs = allreduce_all(3, [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])])
    assert all(o.data.tolist() == [9.0, 12.0] for o in outs)


def test_allreduce_k1_identity():
    g = make_groups(1)[0]
    t = Tensor([1.5, -2.0], FP32)
    assert ring_allreduce(g, t).data.tobytes() == t.data.tobytes()


@pytest.mark.parametrize("kind", TRANSPORTS)
@pytest.mark.parametrize("k", [2, 3, 4, 8])
@pytest.mark.parametrize("n", [1, 7, 1001])
def test_allreduce_matches_direct_sum(kind, k, n):
    r = np.random.default_rng(k * 1000 + n)
    bufs = [r.normal(size=n) for _ in range(k)]
    outs = allreduce_all(k, bufs, kind)
    ref = np.sum([b.astype(np.float32).astype(np.float64) for b in bufs], axis=0)
    for o in outs:
        assert o.data.tobytes() == outs[0].data.tobytes()
        assert np.max(np.abs(o.data - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-6


def test_allreduce_keeps_shape_and_dtype():
    bufs = [np.ones((2, 3)) * i for i in range(3)]
    outs = allreduce_all(3, bufs, dtype=FP16)
    assert outs[0].shape == (2, 3) and outs[0].dtype is FP16 and np.all(outs[0].data == 3)


def test_allreduce_shape_mismatch():
    groups = make_groups(2, timeout=5)
    with pytest.raises(CollectiveError):
        run_ranks(2, lambda r: ring_allreduce(groups[r], Tensor(np.ones(3 + r), FP32)))


def test_out_of_order_collectives_raise_protocol_error():
    groups = make_groups(2, timeout=5)
    groups[1].next_seq()  # rank 1 believes one collective already happened

    def rank(r):
        try:
            return ring_allreduce(groups[r], Tensor(np.ones(4), FP32))
        finally:
            groups[r].close()

    with pytest.raises((ProtocolError, TransportError)) as info:
        run_ranks(2, rank)
    assert isinstance(info.value, ProtocolError) or "disconnected" in str(info.value)


# ---------------------------------------------------------------- broadcast


@pytest.mark.parametrize("kind", TRANSPORTS)
def test_broadcast(kind):
    groups = make_groups(4, kind, timeout=10)
    src = Tensor(np.random.default_rng(0).normal(size=(3, 5)), FP32)
    try:
        outs = run_ranks(4, lambda r: broadcast(groups[r], 0, src if r == 0 else None))
    finally:
        for g in groups:
            g.close()
    assert {digest(o) for o in outs} == {digest(src)}
    one = make_groups(1)[0]
    assert digest(broadcast(one, 0, src)) == digest(src)
    with pytest.raises(CollectiveError):
        broadcast(one, 1, src)


# ---------------------------------------------------------------- parameter server


def ps_setup(k, w0, lr=0.5, kind="inproc"):
    groups = make_groups(k, kind, timeout=10)
    server = start_server(groups[0], update=sgd_update(lr), keys={"w": Tensor(w0, FP32)})
    return groups, server


def close(groups, server):
    server.stop()
    for g in groups:
        g.close()


@pytest.mark.parametrize("kind", TRANSPORTS)
def test_ps_push_sums_then_updates(kind):
    groups, server = ps_setup(2, np.zeros(3), kind=kind)
    g = Tensor([1.0, 2.0, 3.0], FP32)
    try:
        def rank(r):
            ps_push(groups[r], "w", g)
            return ps_pull(groups[r], "w")

        outs = run_ranks(2, rank)
    finally:
        close(groups, server)
    assert server.last_sum["w"].data.tolist() == [2.0, 4.0, 6.0]
    for w, version, _ in outs:
        assert version == 1 and w.data.tolist() == [-1.0, -2.0, -3.0]


def test_ps_initial_pull_is_version_zero():
    groups, server = ps_setup(2, np.array([4.0, 5.0]))
    try:
        w, version, _ = ps_pull(groups[1], "w")
    finally:
        close(groups, server)
    assert version == 0 and w.data.tolist() == [4.0, 5.0]


def test_ps_errors():
    groups, server = ps_setup(2, np.zeros(2))
    try:
        with pytest.raises(PSKeyError):
            ps_push(groups[0], "nope", Tensor([1.0, 1.0], FP32))
        ps_push(groups[1], "w", Tensor([1.0, 1.0], FP32))
        with pytest.raises(ProtocolError):
            ps_push(groups[1], "w", Tensor([1.0, 1.0], FP32))
        with pytest.raises(ProtocolError):
            ps_push(groups[0], "w", Tensor([1.0, 1.0, 1.0], FP32))
    finally:
        close(groups, server)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_ps_step_bitwise_equals_allreduce_step(k):
    r = np.random.default_rng(k)
    w0 = r.normal(size=37).astype(np.float32)
    grads = [Tensor(r.normal(size=37), FP32) for _ in range(k)]
    groups, server = ps_setup(k, w0, lr=0.1)
    try:
        def ps_rank(rank):
            ps_push(groups[rank], "w", grads[rank])
            return ps_pull(groups[rank], "w")[0]

        via_ps = run_ranks(k, ps_rank)
    finally:
        close(groups, server)
    ring_groups = make_groups(k)
    summed = run_ranks(k, lambda rank: ring_allreduce(ring_groups[rank], grads[rank]))
    via_ring = [sgd_update(0.1)("w", Tensor(w0, FP32), s)[0] for s in summed]
    assert all(a.data.tobytes() == via_ring[0].data.tobytes() for a in via_ps + via_ring)


# ---------------------------------------------------------------- cost model


def model(k, payload=100 * MB, alg="ring", bw=25 * GBIT, **kw):
    return simulate_step_time(CostModel(bw, 0.0, payload, k, alg, 0.5, **kw))


def test_cost_model_examples():
    fp32 = model(4)
    assert abs(fp32.comm_time - 0.048) < 1e-12 and abs(fp32.efficiency - 0.5 / 0.548) < 1e-12
    assert abs(fp32.efficiency - 0.912) < 1e-3
    fp16 = model(4, 50 * MB)
    assert abs(fp16.comm_time - 0.024) < 1e-12 and abs(fp16.efficiency - 0.954) < 1e-3
    for alg in ("ring", "ps"):
        one = model(1, alg=alg)
        assert one.efficiency == 1.0 and one.throughput == 1.0


def test_cost_model_formulas():
    m = CostModel(1e9, 1e-3, 2e8, 5, "ps", 0.5, overlap=0.25)
    est = simulate_step_time(m)
    assert np.isclose(est.comm_time, 2 * 5 * 2e8 / 1e9 + 2e-3)
    assert np.isclose(est.step_time, 0.5 + 0.75 * est.comm_time)
    assert np.isclose(est.throughput, 5 * est.efficiency)
    ring = simulate_step_time(CostModel(1e9, 1e-3, 2e8, 5, "ring", 0.5))
    assert np.isclose(ring.comm_time, 2 * 4 * (1e-3 + 2e8 / (5 * 1e9)))


@settings(max_examples=50)
@given(st.floats(1e6, 1e10), st.floats(1e5, 1e9), st.one_of(st.just(0.0), st.floats(0, 1e-2)),
       st.sampled_from(["ring", "ps"]))
def test_cost_model_monotonicity(bw, payload, latency, alg):
    def eff(k, b=bw, s=payload, a=alg):
        return simulate_step_time(CostModel(b, latency, s, k, a, 0.5)).efficiency

    ks = [1, 2, 3, 4, 8, 16]
    effs = [eff(k) for k in ks]
    assert all(e2 <= e1 + 1e-15 for e1, e2 in zip(effs, effs[1:]))
    for k in ks[1:]:
        assert eff(k, b=2 * bw) >= eff(k)
        # ring pays 2(K-1) latencies against the server's 2, so compare bandwidth terms only
        if latency == 0:
            assert eff(k, a="ring") >= eff(k, a="ps")
        assert eff(k, s=payload / 2) > eff(k)


@pytest.mark.parametrize("kw", [dict(bandwidth=0), dict(payload=-1), dict(workers=0), dict(overlap=1.5),
                                dict(algorithm="tree"), dict(latency=-1)])
def test_cost_model_validation(kw):
    base = dict(bandwidth=1e9, latency=0.0, payload=1e6, workers=2, algorithm="ring", compute_time=0.5)
    with pytest.raises(ParameterError):
        CostModel(**{**base, **kw})
