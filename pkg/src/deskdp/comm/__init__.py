from deskdp.comm.collectives import CommGroup, broadcast, digest, make_groups, ring_allreduce, ring_order_sum
from deskdp.comm.costmodel import GBIT, MB, CostModel, StepEstimate, simulate_step_time
from deskdp.comm.ps import ParameterServer, ps_pull, ps_push, start_server
from deskdp.comm.transport import InProcHub, SocketTransport, make_socket_transports, make_transports

__all__ = [
    "CommGroup", "broadcast", "digest", "make_groups", "ring_allreduce", "ring_order_sum",
    "GBIT", "MB", "CostModel", "StepEstimate", "simulate_step_time",
    "ParameterServer", "ps_pull", "ps_push", "start_server",
    "InProcHub", "SocketTransport", "make_socket_transports", "make_transports",
]
