"""Exception hierarchy shared by all modules."""


class PartmeshError(Exception):
    """Base class; ``category`` is reported by the command-line clients."""

    category = "error"


class UsageError(PartmeshError, ValueError):
    category = "usage"


class TransportError(PartmeshError, RuntimeError):
    category = "transport"


class ProtocolError(TransportError):
    category = "protocol"


class WorldAborted(TransportError):
    """Raised on surviving ranks when another rank failed."""

    category = "aborted"


class MappingError(PartmeshError, RuntimeError):
    category = "mapping"


class CheckpointError(PartmeshError, OSError):
    category = "io"


class CorruptCheckpoint(CheckpointError):
    category = "corrupt-file"


class IncompatibleSchema(CheckpointError):
    category = "incompatible-schema"


class PhysicsError(PartmeshError, RuntimeError):
    category = "physics"
