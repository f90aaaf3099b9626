"""Alpha-beta cost model for one synchronous data-parallel step."""

from __future__ import annotations

from dataclasses import dataclass

from deskdp.errors import ParameterError

GBIT = 1e9 / 8  # bytes per second in one Gb/s
MB = 1e6


@dataclass(frozen=True)
class CostModel:
    bandwidth: float  # bytes/s per link (and at the server for PS)
    latency: float  # seconds per message
    payload: float  # gradient bytes per worker per step
    workers: int
    algorithm: str = "ring"
    compute_time: float = 0.5  # seconds of forward+backward per step
    overlap: float = 0.0  # fraction of communication hidden behind compute

    def __post_init__(self):
        if self.bandwidth <= 0 or self.payload <= 0 or self.compute_time <= 0:
            raise ParameterError("bandwidth, payload and compute_time must be positive")
        if self.latency < 0:
            raise ParameterError("latency must be non-negative")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ParameterError("overlap must lie in [0, 1]")
        if self.algorithm not in ("ring", "ps"):
            raise ParameterError(f"unknown algorithm {self.algorithm!r}")


@dataclass(frozen=True)
class StepEstimate:
    comm_time: float
    step_time: float
    efficiency: float
    throughput: float  # multiple of single-worker throughput


def comm_time(m: CostModel) -> float:
    k = m.workers
    if k == 1:
        return 0.0
    if m.algorithm == "ring":
        return 2 * (k - 1) * (m.latency + m.payload / (k * m.bandwidth))
    # single server receives K pushes and sends K pulls through one link
    return 2 * k * m.payload / m.bandwidth + 2 * m.latency


def simulate_step_time(m: CostModel) -> StepEstimate:
    comm = comm_time(m)
    step = m.compute_time + (1.0 - m.overlap) * comm
    eff = m.compute_time / step
    return StepEstimate(comm, step, eff, m.workers * eff)
