"""Exception hierarchy shared by all qforge modules."""


class QforgeError(Exception):
    """Base class for every error raised by qforge."""


class ShapeError(QforgeError, ValueError):
    """Operand shapes do not agree."""


class ContractError(QforgeError, ValueError):
    """A precondition of an operation was violated."""


class StateError(QforgeError, RuntimeError):
    """An object is not in the state required by the operation."""


class DegenerateRangeError(QforgeError, ValueError):
    """A quantization range is empty or collapsed to a point."""


class RequantUnderflowError(QforgeError, ValueError):
    """A requantization ratio is too small to encode at the maximum shift."""


class DataError(QforgeError, ValueError):
    """Input data is empty or unusable."""


class SchemaError(DataError):
    """A dataset file does not match its column schema."""


class ParseError(DataError):
    """A cell of a dataset file could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class LedgerError(DataError):
    """A search ledger cannot be read or does not match the requested run."""


class TrainingError(QforgeError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CodegenError(QforgeError):
    """A layer cannot be rendered to VHDL."""


class SimulationError(QforgeError):
    """The external RTL simulator failed or reported a mismatch."""

    def __init__(self, message, log=""):
        super().__init__(message)
        self.log = log
