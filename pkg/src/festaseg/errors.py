"""Exception hierarchy shared by every module.

Validation-type errors map to CLI exit code 2, everything else to 1.
"""


class FestaSegError(Exception):
    kind = "runtime"


class ValidationError(FestaSegError, ValueError):
    kind = "validation"


class ShapeError(ValidationError):
    kind = "shape"


class ParameterError(ValidationError):
    kind = "parameter"


class UsageError(ValidationError):
    kind = "usage"


class FormatError(ValidationError):
    kind = "format"


class GraphError(FestaSegError, RuntimeError):
    kind = "graph"


class SelectionError(FestaSegError):
    kind = "selection"


class LossError(FestaSegError):
    kind = "loss"


class GenerationError(FestaSegError):
    kind = "generation"


class TrainingError(FestaSegError):
    kind = "training"


class DataError(FestaSegError):
    kind = "data"


class ScoreError(FestaSegError):
    kind = "score"
