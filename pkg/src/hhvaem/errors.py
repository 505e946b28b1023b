"""Exception types shared across the package."""


class HHVAEMError(Exception):
    """Base class for all package errors."""


class ShapeError(HHVAEMError, ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op, shape_a, shape_b=None, detail=""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a}"
        if shape_b is not None:
            msg += f" and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(HHVAEMError, ValueError):
    """A documented precondition was violated by the caller."""


class DomainError(HHVAEMError, ValueError):
    """A value lies outside the support of its feature type."""

    def __init__(self, feature, value, detail=""):
        self.feature = feature
        self.value = value
        msg = f"value {value!r} outside the support of feature {feature!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DivergenceError(HHVAEMError, FloatingPointError):
    """Optimisation produced a non-finite gradient or loss."""

    def __init__(self, name, detail=""):
        self.name = name
        msg = f"non-finite values encountered in {name!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigurationError(HHVAEMError, ValueError):
    """Unknown recipe, density, option or malformed configuration."""


class DataFormatError(HHVAEMError, ValueError):
    """Malformed CSV, typespec or split file."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)
