"""Exception types raised by the engine.

Every error carries a stable ``code`` string so the CLI and the run reports
can surface a machine-readable reason next to the message.
"""


class PetfuseError(Exception):
    code = "ERROR"


class InvalidVolume(PetfuseError, ValueError):
    code = "INVALID_VOLUME"


class MalformedHeader(PetfuseError):
    code = "MALFORMED_HEADER"


class Unsupported(PetfuseError):
    code = "UNSUPPORTED"


class IOFailure(PetfuseError, OSError):
    code = "IO_FAILURE"


class OutOfRange(PetfuseError, IndexError):
    code = "OUT_OF_RANGE"


class EmptyMask(PetfuseError):
    code = "EMPTY_MASK"


class DegenerateBox(PetfuseError):
    code = "DEGENERATE_BOX"


class BadMode(PetfuseError, ValueError):
    code = "BAD_MODE"


class OutOfGrid(PetfuseError, IndexError):
    code = "OUT_OF_GRID"


class MissingPatch(PetfuseError):
    code = "MISSING_PATCH"


class EmptyList(PetfuseError, ValueError):
    code = "EMPTY_LIST"


class DimsMismatch(PetfuseError, ValueError):
    code = "DIMS_MISMATCH"


class GridMismatch(PetfuseError, ValueError):
    code = "GRID_MISMATCH"


class ExternalFailure(PetfuseError):
    code = "EXTERNAL_FAILURE"


class ConfigError(PetfuseError, ValueError):
    code = "CONFIG_ERROR"


class StageError(PetfuseError):
    """Wraps a module error with the pipeline stage it came from."""

    code = "STAGE_FAILURE"

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", type(cause).__name__)
        super().__init__(f"[{stage}] {self.code}: {cause}")


class PartialFailure(PetfuseError):
    code = "PARTIAL_FAILURE"

    def __init__(self, failures):
        self.failures = dict(failures)
        detail = "; ".join(f"fold {k}: {v}" for k, v in sorted(self.failures.items()))
        super().__init__(f"{len(self.failures)} fold(s) failed: {detail}")
