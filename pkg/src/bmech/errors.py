"""Exception types shared across the package."""


class BmechError(Exception):
    """Base class for all package errors."""


class SingularMetric(BmechError):
    """Metric is singular or not positive-definite where required."""


class Degenerate(BmechError):
    """Degenerate bilinear form (symplectic or metric input)."""


class DomainError(BmechError):
    """Expression evaluated outside its mathematical domain."""


class ExprSyntaxError(BmechError):
    """Syntax error in an expression, with position information."""

    def __init__(self, line, col, expected, found):
        self.line = line
        self.col = col
        self.expected = tuple(sorted(expected))
        self.found = found
        super().__init__(
            f"syntax error at {line}:{col}: expected {', '.join(self.expected)}, "
            f"found {found}"
        )


class UnknownIdentifier(BmechError):
    """Identifier not among variables, parameters, or known functions."""

    def __init__(self, line, col, name):
        self.line = line
        self.col = col
        self.name = name
        super().__init__(f"unknown identifier '{name}' at {line}:{col}")


class DimensionMismatch(BmechError):
    """Array or variable index inconsistent with the declared dimension."""


class SpecError(BmechError):
    """System specification file is structurally invalid."""


class NoConvergence(BmechError):
    """Newton iteration failed to reach the residual tolerance."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no convergence after {iterations} iterations, residual {residual:.3e}"
        )


class SingularHessian(BmechError):
    """Second variation is numerically singular: conjugate point / caustic."""


class OffShell(BmechError):
    """Boundary phase point does not satisfy p = -grad(S) within tolerance."""


class WeightMismatch(BmechError):
    """Density weight of the operand differs from the operator's declared weight."""


class NonNaturalLagrangian(BmechError):
    """System has no metric + potential structure, so no Hamiltonian exists."""


class Instability(BmechError):
    """Norm drift of the propagator exceeded the stability threshold."""
