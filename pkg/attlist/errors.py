import sys

# user-friendly error messages, keyed by error code
ERROR_MESSAGES = {
    "dimension_error": "Array shapes don't line up for this operation.",
    "degenerate_input": "Every position in a row is masked, so there is nothing to attend to.",
    "configuration_error": "The configuration is invalid. Please check the named field.",
    "uninitialized_gradient": "A parameter has no gradient. Run a backward pass first.",
    "determinism_error": "Two evaluations of the same loss disagree.",
    "parse_error": "An input file could not be parsed.",
    "referential_integrity": "The input files refer to something that doesn't exist.",
    "label_error": "Labels must be 0 or 1.",
    "divergence": "Training diverged (the loss is no longer finite).",
    "checkpoint_mismatch": "The checkpoint was trained with a different configuration.",
    "unknown_entity": "The requested user or list doesn't exist in this dataset.",
    "storage_error": "A file could not be read or written.",
}

# exit codes per error code, 1 is the fallback
EXIT_CODES = {
    "configuration_error": 2,
    "parse_error": 3,
    "referential_integrity": 3,
    "storage_error": 4,
    "checkpoint_mismatch": 5,
    "unknown_entity": 6,
    "divergence": 7,
}


class AttListError(Exception):
    """Base class for every error this package raises on purpose."""
    code = "error"

    def __init__(self, message: str | None = None):
        self.message = message or ERROR_MESSAGES.get(self.code, "An unexpected error occurred.")
        super().__init__(self.message)


class DimensionError(AttListError):
    code = "dimension_error"

    def __init__(self, op: str, *shapes: tuple):
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class DegenerateInputError(AttListError):
    code = "degenerate_input"


class ConfigurationError(AttListError):
    code = "configuration_error"

    def __init__(self, message: str | None = None, field: str | None = None):
        self.field = field
        if field and message:
            message = f"{field}: {message}"
        super().__init__(message)


class UninitializedGradientError(AttListError):
    code = "uninitialized_gradient"

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter '{name}' has no gradient")


class DeterminismError(AttListError):
    code = "determinism_error"


class DatasetParseError(AttListError):
    code = "parse_error"

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}, line {line_number}: {reason}")


class ReferentialIntegrityError(AttListError):
    code = "referential_integrity"


class LabelValidationError(AttListError):
    code = "label_error"


class DivergenceError(AttListError):
    code = "divergence"

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")


class CheckpointMismatchError(AttListError):
    code = "checkpoint_mismatch"


class UnknownEntityError(AttListError):
    code = "unknown_entity"

    def __init__(self, kind: str, entity_id: str):
        self.kind = kind
        self.entity_id = entity_id
        super().__init__(f"unknown {kind} id '{entity_id}'")


class StorageError(AttListError):
    code = "storage_error"


def get_exit_code(exc: AttListError) -> int:
    """Convert an error to a process exit code."""
    return EXIT_CODES.get(exc.code, 1)


def handle_cli_error(exc: AttListError) -> int:
    """
    Print a friendly one-line message and return the exit code.
    Preserves the specific message when one was provided.
    """
    print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
    return get_exit_code(exc)
