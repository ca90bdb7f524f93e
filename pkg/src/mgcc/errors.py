"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid run configuration (CLI exit code 2)."""


class DataError(Exception):
    """Dataset layout, manifest or content problem (CLI exit code 3)."""


class NumericalError(Exception):
    """NaN/Inf encountered during optimization (CLI exit code 4)."""


class CheckpointError(Exception):
    """Unreadable, truncated or incompatible checkpoint (CLI exit code 3)."""
