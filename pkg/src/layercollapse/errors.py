"""Exception hierarchy shared across the package.

Each error carries a stable ``error_class`` slug so the command line tool can
emit a single machine-parsable failure line without inspecting messages.
"""


class EngineError(Exception):
    """Base class for operational failures (bad inputs, bad artifacts)."""

    error_class = "engine-error"


class CheckpointError(EngineError):
    """Checkpoint directory is malformed or unreadable."""

    error_class = "checkpoint-error"


class MissingTensorError(CheckpointError):
    error_class = "missing-tensor"


class ShapeMismatchError(CheckpointError):
    error_class = "shape-mismatch"


class NonFiniteTensorError(CheckpointError):
    error_class = "non-finite-tensor"


class CalibrationError(EngineError):
    """Calibration file cannot supply the requested sentences."""

    error_class = "insufficient-calibration"


class InvalidTargetError(EngineError):
    """Compression target does not map to a usable removed-layer count."""

    error_class = "invalid-target"


class InfeasibleRunError(EngineError):
    """Search finished without producing a single feasible individual."""

    error_class = "infeasible-run"


class PlanMismatchError(EngineError):
    """Plan and model disagree about the original layer count."""

    error_class = "layer-count-mismatch"
