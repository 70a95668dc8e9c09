"""Exceptions shared across the pipeline; the CLI maps them to exit codes."""


class SpatgevError(Exception):
    """Base class for pipeline failures."""


class ConfigError(SpatgevError):
    """Bad or inconsistent run configuration (exit code 2)."""


class ConvergenceError(SpatgevError):
    """Convergence diagnostics failed a strict gate (exit code 3)."""


class DataError(SpatgevError):
    """Input data missing, malformed or out of coverage (exit code 4)."""
