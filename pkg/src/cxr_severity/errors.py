"""Exception hierarchy shared by every subsystem.

Each error carries the name of the subsystem that raised it so the CLI can
emit a single machine-parsable line.
"""


class CxrError(Exception):
    module = "core"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module


class ShapeError(CxrError, ValueError):
    module = "tensor"


class ContractError(CxrError, ValueError):
    module = "tensor"


class EvaluationError(CxrError, ArithmeticError):
    module = "tensor"


class ConstructionError(CxrError, ValueError):
    module = "model"


class FormatError(CxrError, ValueError):
    module = "checkpoint"


class CompatibilityError(CxrError, ValueError):
    module = "checkpoint"


class IneligibleSampleError(CxrError, ValueError):
    module = "data"


class RangeError(CxrError, ValueError):
    module = "data"


class InputError(CxrError, ValueError):
    module = "data"


class ParameterError(CxrError, ValueError):
    module = "data"


class RequestError(CxrError, ValueError):
    module = "data"


class ConfigurationError(CxrError, ValueError):
    module = "data"


class DataError(CxrError, ValueError):
    module = "data"


class TrainingError(CxrError, ArithmeticError):
    module = "train"


class ModelError(CxrError, ArithmeticError):
    module = "explain"


class ConfigError(CxrError, ValueError):
    module = "cli"


class OutputError(CxrError, OSError):
    module = "explain"
