"""Exception taxonomy shared across the package."""


class HbfError(Exception):
    """Base class for all hbflearn errors."""


class DimensionError(HbfError, ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class ParameterError(HbfError, ValueError):
    """A numeric argument is outside its allowed range."""


class NumericError(HbfError, ArithmeticError):
    """A computation produced NaN/Inf or an otherwise invalid value."""


class ContractError(HbfError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class StructureError(HbfError, ValueError):
    """A beamformer violates its declared hardware structure."""


class DegenerateInputError(HbfError, ValueError):
    """Input is degenerate for the operation (e.g. all-zero precoder)."""


class GuardError(HbfError, RuntimeError):
    """A resource guard tripped (e.g. enumeration space too large)."""


class FormatError(HbfError, ValueError):
    """A serialized file is malformed or has the wrong magic/version."""


class ConfigError(HbfError, ValueError):
    """An experiment configuration is invalid."""


class TrainingAborted(HbfError, RuntimeError):
    """Training hit a non-finite loss and was aborted.

    Carries a diagnostic payload (last batch index, epoch, parameter norms)
    so the failure state can be inspected.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
