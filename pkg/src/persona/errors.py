"""Exception types shared across the package."""


class PersonaError(Exception):
    pass


class ShapeError(PersonaError, ValueError):
    """Array shapes do not line up."""


class NumericError(PersonaError, ArithmeticError):
    """A computation produced NaN or Inf."""


class InvalidInputError(PersonaError, ValueError):
    pass


class DataError(PersonaError, ValueError):
    """Item ids or records that do not fit the model or dataset."""


class SpecError(PersonaError, ValueError):
    """A generator spec that cannot produce data."""


class FormatError(PersonaError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ParseError(FormatError):
    pass


class ProtocolError(PersonaError):
    """Malformed wire message or incompatible weight payload."""


class ConfigurationError(PersonaError, ValueError):
    pass


class LifecycleError(PersonaError, RuntimeError):
    """An operation was called before its prerequisites ran."""


class PartitionError(PersonaError):
    pass


class TrainingError(PersonaError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}" if epoch is not None else message)


class FreezeViolation(TrainingError):
    """A training phase mutated a tensor it does not own."""


class ChecksumError(PersonaError):
    pass


class IncompatibleVersionError(PersonaError):
    pass
