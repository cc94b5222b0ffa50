"""Exception types shared across padlab."""


class PadlabError(Exception):
    pass


class DimensionError(PadlabError, ValueError):
    """Operand shapes are incompatible (channel count, inner dims, sizes)."""


class GeometryError(PadlabError, ValueError):
    """Spatial geometry is invalid: kernel wider than padded input, odd pooling input, ..."""


class ContractError(PadlabError, RuntimeError):
    """An API precondition was violated (non-scalar loss, missing gradient, ...)."""


class ConfigError(PadlabError, ValueError):
    pass


class DatasetError(PadlabError, FileNotFoundError):
    """Dataset files are missing or unreadable."""
