"""Exception hierarchy. Every error carries a ``category`` used by the CLI exit message."""


class DeskDPError(Exception):
    category = "error"


class ShapeError(DeskDPError, ValueError):
    category = "shape"


class GraphError(DeskDPError):
    category = "graph"


class ContractError(DeskDPError):
    category = "contract"


class TopologyError(DeskDPError):
    category = "topology"


class PlanError(DeskDPError, ValueError):
    category = "plan"


class TraceError(DeskDPError):
    category = "trace"


class NonInvertibleError(DeskDPError, ValueError):
    category = "non-invertible"


class DegenerateBatchError(DeskDPError):
    category = "degenerate-batch"


class ParameterError(DeskDPError, ValueError):
    category = "parameter"


class TransportError(DeskDPError):
    category = "transport"


class ProtocolError(DeskDPError):
    category = "protocol"


class CollectiveError(DeskDPError):
    category = "collective"


class PSKeyError(DeskDPError, KeyError):
    category = "key"


class ConfigError(DeskDPError):
    category = "config"

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CheckpointError(DeskDPError):
    category = "checkpoint"


class CheckpointFormatError(CheckpointError):
    pass


class DigestError(CheckpointError):
    pass


class WorkerError(DeskDPError):
    category = "worker"

    def __init__(self, rank, cause):
        self.rank = rank
        self.cause = cause
        super().__init__(f"rank {rank}: {type(cause).__name__}: {cause}")
