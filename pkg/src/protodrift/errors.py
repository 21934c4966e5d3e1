"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class DataFormatError(ValueError):
    """A dataset or report file does not match its documented format."""


class UsageError(ValueError):
    """Bad CLI arguments or a malformed experiment config."""
