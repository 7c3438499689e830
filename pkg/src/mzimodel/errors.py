"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see ``cli.EXIT_CODES``), so
raising the right class matters more than the message wording.
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (unknown key, wrong type, bad grid)."""


class DataError(ValueError):
    """Malformed dataset, refused file operation, or out-of-range input data."""


class SchemaError(DataError):
    """A serialized artifact (model JSON, chip JSON, CSV) failed validation.

    ``location`` names the offending field so callers can report it.
    """

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location


class TrainingError(RuntimeError):
    """A fit or training run failed in a way the optimizer could not recover."""


class StageError(TrainingError):
    """A stage of the transfer-learning pipeline failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class ClipFloorError(ArithmeticError):
    """Gradient requested at a point where an output sits on the dB clip floor."""
