"""
Exception hierarchy for the retinal MPC toolkit.
"""


class RetinaError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(RetinaError):
    """Invalid geometry, grid or scenario configuration."""


class DomainError(RetinaError):
    """Argument outside the mathematical domain of an operation (e.g. alpha <= 0)."""


class AssemblyError(RetinaError):
    """Model assembly or snapshot generation produced non-finite data."""


class RankError(RetinaError):
    """Requested basis size exceeds the numerical rank of the data."""


class NumericalError(RetinaError):
    """A factorization or update that must succeed did not."""


class QpSetupError(RetinaError):
    """QP data violates the solver's preconditions."""


class QpUpdateError(RetinaError):
    """In-place QP update with incompatible shape or sparsity pattern."""


class ModelError(RetinaError):
    """Reduced model cannot deliver the requested quantity (e.g. zero static gain)."""


class OcpSpecError(RetinaError):
    """Optimal control problem definition is invalid."""


class ArtifactError(RetinaError):
    """Reduced-model artifact cannot be read or does not fit the scenario."""


class RunAbortedError(RetinaError):
    """Closed-loop run stopped because the plant or the loop produced non-finite values."""
