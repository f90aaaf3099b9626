import csv

import numpy as np
import pytest

from deskdp.config import parse_config
from deskdp.errors import WorkerError
from deskdp.tensor import FP32, Tensor
from deskdp.trainer import METRIC_COLUMNS, resume, train


def cfg(tmp_path=None, **sections):
    base = parse_config("model: {}\ntrain: {steps: 10}\n")
    if tmp_path is not None:
        sections.setdefault("output", {"dir": str(tmp_path)})
    return base.replace(**sections)


def weights(c, **kw):
    return train(c, record_weights=True, write_outputs=False, **kw).weights


def test_two_synced_workers_match_one_worker_on_the_concatenated_batch():
    one = weights(cfg(comm={"K": 1}, train={"steps": 20, "batch_per_worker": 16}))
    two = weights(cfg(comm={"K": 2}, bn={"mode": "sync"}, train={"steps": 20, "batch_per_worker": 8}))
    for a, b in zip(one, two):
        assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(a)))


def test_unsynced_workers_drift_from_the_single_worker_run():
    one = weights(cfg(comm={"K": 1}, train={"steps": 20, "batch_per_worker": 16}))
    two = weights(cfg(comm={"K": 2}, train={"steps": 20, "batch_per_worker": 8}))
    assert np.max(np.abs(one[-1] - two[-1])) > 1e-4


def test_ring_and_parameter_server_give_bitwise_equal_weights():
    ring = weights(cfg(comm={"K": 3, "backend": "ring"}, train={"steps": 50}))
    ps = weights(cfg(comm={"K": 3, "backend": "ps"}, train={"steps": 50}))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ring, ps)) and len(ring) == 50


@pytest.mark.parametrize("precision", ["fp32", "mixed"])
def test_repeat_runs_write_identical_metrics(tmp_path, precision):
    blobs = []
    for i in range(2):
        r = train(cfg(tmp_path / str(i), comm={"K": 2}, precision={"mode": precision}))
        blobs.append(r.metrics_path.read_bytes())
    assert blobs[0] == blobs[1]


def test_metrics_file_layout(tmp_path):
    r = train(cfg(tmp_path, comm={"K": 2}, train={"steps": 4}))
    with r.metrics_path.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [int(x[0]) for x in rows[1:]] == [1, 2, 3, 4]
    assert all(float(x[1]) > 0 and x[3] == "0" and int(x[5]) > 0 for x in rows[1:])
    assert (tmp_path / "resolved.yaml").exists() and r.checkpoint_path.exists()


@pytest.mark.parametrize("backend", ["ring", "ps"])
def test_resume_continues_bitwise(tmp_path, backend):
    full = cfg(tmp_path / "full", comm={"K": 2, "backend": backend}, precision={"mode": "mixed"},
               train={"steps": 12})
    straight = train(full, record_weights=True)
    half = full.replace(output={"dir": str(tmp_path / "half")}, train={"checkpoint_every": 6})
    train(half.replace(train={"steps": 6}), record_weights=True)
    resumed = resume(tmp_path / "half" / "step000006.ckpt", half.replace(train={"steps": 12}), force=True,
                     record_weights=True)
    assert [w.tobytes() for w in resumed.weights] == [w.tobytes() for w in straight.weights[6:]]
    with (tmp_path / "half" / "metrics.csv").open() as fh:
        resumed_csv = fh.read()
    assert resumed_csv == straight.metrics_path.read_text()


def test_injected_overflow_skips_the_step_and_halves_the_scale():
    def hook(step, rank, grads):
        if step == 4 and rank == 1:
            name = sorted(grads)[0]
            g = grads[name].data.copy()
            g.flat[0] = np.inf
            grads = {**grads, name: Tensor(g, grads[name].dtype)}
        return grads

    c = cfg(comm={"K": 2}, precision={"mode": "mixed"})
    r = train(c, grad_hook=hook, record_weights=True, write_outputs=False)
    assert [row["skipped"] for row in r.rows] == [0, 0, 0, 1, 0, 0, 0, 0, 0, 0]
    assert r.rows[4]["scale"] == r.rows[3]["scale"] / 2
    assert r.weights[3].tobytes() == r.weights[2].tobytes()
    assert r.weights[4].tobytes() != r.weights[3].tobytes()


def test_worker_failure_is_reported_with_its_rank():
    def hook(step, rank, grads):
        if step == 2 and rank == 1:
            raise RuntimeError("boom")
        return grads

    with pytest.raises(WorkerError) as info:
        train(cfg(comm={"K": 3, "timeout": 5}), grad_hook=hook, write_outputs=False)
    assert info.value.rank == 1 and "boom" in str(info.value)


def test_socket_transport_matches_inproc():
    a = weights(cfg(comm={"K": 2, "transport": "inproc"}, train={"steps": 5}))
    b = weights(cfg(comm={"K": 2, "transport": "socket"}, train={"steps": 5}))
    assert [w.tobytes() for w in a] == [w.tobytes() for w in b]


@pytest.mark.parametrize("section", [{"bn": {"mode": "iabn"}}, {"memory": {"checkpointing": True}}])
def test_memory_savers_do_not_change_the_trajectory(section):
    plain = weights(cfg(train={"steps": 5}))
    saved = weights(cfg(train={"steps": 5}, **section))
    tol = 0 if "memory" in section else 1e-5
    assert all(np.max(np.abs(a - b)) <= tol for a, b in zip(plain, saved))


def test_separable_data_is_learned():
    r = train(cfg(train={"steps": 200}, data={"noise": 0.05}), write_outputs=False)
    assert r.rows[-1]["loss"] < 0.05 and r.rows[0]["loss"] > 1.0
