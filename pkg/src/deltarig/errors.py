"""Exception types shared across the package.

Each maps to one CLI exit code category (see cli.EXIT_CODES).
"""


class DeltaRigError(Exception):
    """Base class for all package errors."""


class ConfigError(DeltaRigError):
    """Invalid configuration or argument values."""


class MeshFormatError(DeltaRigError):
    """OBJ parse failure. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshStructureError(DeltaRigError):
    """Connectivity violates a mesh invariant (isolated vertex, bad face)."""


class DimensionMismatchError(DeltaRigError):
    """Operand shapes are inconsistent with the mesh or each other."""


class AnchorError(DeltaRigError):
    """Anchor set is invalid: empty, out of range, duplicated, or bad weights."""


class AnchorCoverageError(AnchorError):
    """A connected component of the mesh has no anchor."""


class RankDeficiencyError(DeltaRigError):
    """Cholesky hit a non-positive pivot. `column` is the failing column
    in the original (unpermuted) vertex ordering."""

    def __init__(self, message: str, column: int | None = None):
        self.column = column
        super().__init__(message)


class SingularTransformError(DeltaRigError):
    """A recovered per-vertex transform is not invertible."""

    def __init__(self, message: str, vertex: int | None = None,
                 pose_id: str | None = None):
        self.vertex = vertex
        self.pose_id = pose_id
        super().__init__(message)


class TrainingDivergedError(DeltaRigError):
    """Loss became non-finite during training. Carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message)


class HashMismatchError(DeltaRigError):
    """Artifacts disagree about the mesh or configuration they were built on."""


class ArtifactError(DeltaRigError):
    """A required artifact file is missing or malformed."""
