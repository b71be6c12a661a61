"""Exception hierarchy shared by every module.

``exit_code`` is consumed by the CLI: 2 for bad input, 3 for runtime failures.
"""


class RigforgeError(Exception):
    exit_code = 2


class ValidationError(RigforgeError, ValueError):
    """Input failed a schema or invariant check."""


class DimensionError(ValidationError):
    pass


class TopologyError(ValidationError):
    pass


class AlignmentDegenerateError(ValidationError):
    pass


class IncompleteCorrespondenceError(ValidationError):
    pass


class BindingError(ValidationError):
    pass


class MapError(ValidationError):
    pass


class SkeletonError(ValidationError):
    pass


class GraphError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class ModelError(ValidationError):
    pass


class CompositionError(ValidationError):
    pass


class InfeasiblePathError(RigforgeError):
    exit_code = 3

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"no feasible path at step {step}")


class TrainingFailureError(RigforgeError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
