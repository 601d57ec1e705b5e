"""Exception types shared across the package."""


class CardioGuardError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CardioGuardError, ValueError):
    pass


class NonFiniteError(CardioGuardError, FloatingPointError):
    pass


class NotScalarLoss(CardioGuardError, ValueError):
    pass


class MissingStructure(CardioGuardError):
    def __init__(self, structure: str, msg: str | None = None):
        self.structure = structure
        super().__init__(msg or f"structure {structure} is absent")


class DimensionMismatch(CardioGuardError, ValueError):
    pass


class EmptyClass(CardioGuardError, ValueError):
    pass


class EmptyCalibrationSet(CardioGuardError, ValueError):
    pass


class EmptyDataset(CardioGuardError, ValueError):
    pass


class TooFewSeeds(CardioGuardError, ValueError):
    pass


class TooFewMaps(CardioGuardError, ValueError):
    pass


class AcceptanceStall(CardioGuardError, RuntimeError):
    pass


class EmptyBank(CardioGuardError, ValueError):
    pass


class FormatVersionMismatch(CardioGuardError):
    pass


class ChecksumMismatch(CardioGuardError):
    pass


class RegistrationFailed(CardioGuardError):
    pass


class ViewMismatch(CardioGuardError, ValueError):
    pass


class ParameterOutOfRange(CardioGuardError, ValueError):
    pass


class CouldNotInject(CardioGuardError, RuntimeError):
    pass


class ConfigError(CardioGuardError, ValueError):
    pass
