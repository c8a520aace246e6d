"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ConfigError / UsageError -> 1,
any other MolaError (or unexpected exception) -> 2, AcceptanceError -> 3.
"""

from __future__ import annotations


class MolaError(Exception):
    """Base class for everything raised on purpose by this package."""


class ConfigError(MolaError):
    """Bad configuration: unknown key, invalid value, infeasible world."""


class UsageError(MolaError):
    """Bad command-line usage."""


class PlacementError(MolaError):
    """World initialization could not place entities without overlap."""


class DatasetError(MolaError):
    """Corrupt or incompatible episode file / manifest."""


class CheckpointError(MolaError):
    """Corrupt checkpoint container or missing tensor."""


class LineageError(MolaError):
    """Parent-checkpoint hashes do not match the recorded lineage."""


class TrainingDiverged(MolaError):
    """A training loss went non-finite; carries the offending step."""

    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"{stage}: non-finite loss {value!r} at step {step}")
        self.stage = stage
        self.step = step
        self.value = value


class AcceptanceError(MolaError):
    """An always-on acceptance assertion failed during a run."""
