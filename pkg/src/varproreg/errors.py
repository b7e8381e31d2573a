"""Exception types raised by varproreg."""


class VarproregError(Exception):
    """Base class for all library errors."""


class ContractError(VarproregError, ValueError):
    """An input violates a documented precondition (shape, sign, range)."""


class NonFiniteError(VarproregError, ArithmeticError):
    """A primitive produced a NaN or infinity."""

    def __init__(self, primitive):
        self.primitive = primitive
        super().__init__(f"non-finite value produced by primitive '{primitive}'")


class NotLinearError(VarproregError):
    """An operator handed to the adjoint trick failed the linearity probe."""


class ConsistencyError(VarproregError):
    """An internal self-check failed (e.g. an asymmetric Hessian)."""


class NumericalError(VarproregError):
    """A numerical routine could not complete."""


class DefinitenessError(NumericalError):
    """Conjugate gradients met a non-positive curvature direction."""


class SingularHessianError(NumericalError):
    """A Hessian could not be factored as symmetric positive definite."""


class FormatError(VarproregError, ValueError):
    """A file could not be parsed."""


class ConfigError(VarproregError, ValueError):
    """An experiment configuration is invalid."""
