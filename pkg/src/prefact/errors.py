"""Exception hierarchy shared by every module."""


class PrefactError(Exception):
    pass


class ShapeError(PrefactError, ValueError):
    pass


class ArgumentError(PrefactError, ValueError):
    pass


class NumericalError(PrefactError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StateError(PrefactError, RuntimeError):
    pass


class PlanError(PrefactError, ValueError):
    pass


class TrainingError(PrefactError, RuntimeError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ConfigError(PrefactError, ValueError):
    pass


class DatasetParseError(PrefactError, ValueError):
    def __init__(self, message, line=None, byte=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if byte is not None:
            where.append(f"byte {byte}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.byte = byte


class CheckpointError(PrefactError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
