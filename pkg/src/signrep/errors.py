"""Exception taxonomy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericsError -> 4. Plain ValueError marks a violated call contract.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Corrupt or missing data files, malformed manifests."""


class NumericsError(RuntimeError):
    """Training aborted on a non-finite loss; carries step diagnostics."""
