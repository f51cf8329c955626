"""Exception hierarchy shared by every flsim module."""


class FlsimError(Exception):
    """Base class for all library errors."""


class ConfigError(FlsimError, ValueError):
    """A configuration or precondition violation (bad dims, AGR constraints, ...)."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class InputError(FlsimError, ValueError):
    """Invalid input data (empty datasets, bad sizes)."""


class NumericError(FlsimError, ArithmeticError):
    """A non-finite value appeared during a numeric computation."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class FormatError(FlsimError, ValueError):
    """A file did not match its expected on-disk format."""

    def __init__(self, message, offset=None, row=None):
        self.offset = offset
        self.row = row
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)


class DegenerateDirectionError(InputError):
    """An attack direction is undefined (zero vector)."""


class AttackInfeasible(FlsimError):
    """No admissible poisoned update exists; callers fall back to benign behaviour."""
