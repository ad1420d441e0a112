"""Exception types raised across the package."""


class DomainError(ValueError):
    """A point lies outside the domain of an energy term."""


class ContractError(ValueError):
    """Inputs violate a documented precondition of an operation."""


class SolverError(RuntimeError):
    """An iterative solver failed to reach its target."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class FormatError(ValueError):
    """An input file has an unsupported or corrupt format."""
