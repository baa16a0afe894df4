"""Error types shared across the package.

ConfigError covers bad parameters and malformed configuration; DataError
covers malformed or inconsistent input files. The CLI maps these to
distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid configuration value or missing required setting."""


class DataError(ValueError):
    """Malformed or inconsistent input data (corpus, queries, qrels, runs)."""


class BootstrapError(RuntimeError):
    """The training loop cannot proceed (e.g. zero usable examples)."""
