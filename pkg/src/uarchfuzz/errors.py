"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI and the service lives here so every
entry point classifies failures the same way: config problems are exit 2
(HTTP 400), missing host capabilities are exit 3 (HTTP 503), everything
else is exit 4 (HTTP 500).
"""


class UarchFuzzError(Exception):
    """Base class for all package errors."""

    exit_code = 4
    http_status = 500


class ConfigError(UarchFuzzError):
    """Bad configuration, schema violation, or unparseable input file."""

    exit_code = 2
    http_status = 400


class CatalogSchemaError(ConfigError):
    """Instruction catalog file failed validation."""


class EmptyCatalogError(ConfigError):
    """Catalog contains no instruction sets after load/filter."""


class ActionDecodeError(UarchFuzzError):
    """Action indices outside the declared action-space bounds."""


class CapabilityError(UarchFuzzError):
    """Host lacks a required capability (counters, assembler, pinning)."""

    exit_code = 3
    http_status = 503


class ToolchainError(UarchFuzzError):
    """Assembler or linker failed; carries the tool diagnostics."""


class CalibrationError(UarchFuzzError):
    """Cache hit/miss latency modes could not be separated."""


class ContractViolation(UarchFuzzError):
    """A caller broke an operation precondition."""


class CheckpointError(UarchFuzzError):
    """Checkpoint file is corrupt or incompatible with the current run."""
