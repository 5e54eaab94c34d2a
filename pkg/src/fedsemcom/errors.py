"""Exception types shared across the simulator."""


class FedSemComError(Exception):
    """Base class for every error raised by this package."""


class LayoutError(FedSemComError, ValueError):
    """Parameter vectors or layouts are structurally incompatible."""


class UsageError(FedSemComError, RuntimeError):
    """An API was called out of order (e.g. backward without a forward trace)."""


class ChannelInputError(FedSemComError, ValueError):
    pass


class IngestionError(FedSemComError, OSError):
    pass


class ConfigError(FedSemComError, ValueError):
    pass


class ProtocolError(FedSemComError, RuntimeError):
    """Uploads in one round disagree about which groups were transmitted."""


class DegenerateLossError(FedSemComError, ValueError):
    pass


class DivergenceError(FedSemComError, FloatingPointError):
    def __init__(self, message: str, *, client_id: int | None = None, round_t: int | None = None):
        super().__init__(message)
        self.client_id = client_id
        self.round_t = round_t


class MetricError(FedSemComError, ValueError):
    pass
