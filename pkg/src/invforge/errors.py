"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class InvForgeError(Exception):
    exit_code = 1


class ConfigError(InvForgeError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Shape mismatch between a tensor and the block consuming it."""


class DataError(InvForgeError, ValueError):
    exit_code = 3


class MeshError(DataError):
    """Mesh fails a structural precondition (open, degenerate, empty)."""


class GraphError(DataError):
    pass


class NumericalError(InvForgeError, ArithmeticError):
    exit_code = 4


class DegenerateLatentError(InvForgeError):
    """Decoded occupancy has no 0.5 crossing, so no surface can be extracted."""

    exit_code = 4
