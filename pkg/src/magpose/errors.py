"""Exception types shared across the package."""


class MagposeError(Exception):
    """Base class for all package errors."""


class ContractError(MagposeError, ValueError):
    """A caller violated a documented precondition (shapes, ranges, flags)."""


class SingularFieldError(MagposeError, ValueError):
    """Field requested at (or numerically at) the dipole centre."""

    def __init__(self, message="singular field point", sensor_index=None):
        if sensor_index is not None:
            message = f"{message} (sensor {sensor_index})"
        super().__init__(message)
        self.sensor_index = sensor_index


class FormatError(MagposeError):
    """A file has the wrong magic, version or a corrupt header."""


class NumericError(MagposeError, ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""
