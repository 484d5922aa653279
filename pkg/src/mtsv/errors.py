"""Exception taxonomy shared across the package."""


class MtsvError(Exception):
    """Base class for all package errors."""


class ContractError(MtsvError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class NumericError(MtsvError):
    """A computation produced NaN or Inf."""


class GenerationError(MtsvError):
    """Synthetic corpus generation could not satisfy its constraints."""


class CheckpointError(MtsvError):
    """A checkpoint file is corrupt or has an unsupported format version."""
