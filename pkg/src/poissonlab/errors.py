"""Exception hierarchy shared by all solver modules."""


class PoissonLabError(Exception):
    """Base class for all errors raised by this package."""


class NonSpdMetric(PoissonLabError):
    """Metric matrix failed the symmetric-positive-definite check."""


class NonPositiveConformalFactor(PoissonLabError):
    """Conformal factor must be strictly positive."""


class NonPositiveFactor(PoissonLabError):
    """Scalar scaling field must be strictly positive."""


class DependentInputs(PoissonLabError):
    """Input matrices are not linearly independent in the symmetric space."""


class SingularJacobian(PoissonLabError):
    """Map Jacobian is singular (or a triangle inverted under a map)."""


class DegenerateMesh(PoissonLabError):
    """Mesh construction parameters out of range."""


class DegenerateArc(PoissonLabError):
    """Requested boundary arc too short to carry any node."""


class InvertedTriangle(PoissonLabError):
    """A triangle has nonpositive signed area."""


class FactorizationFailed(PoissonLabError):
    """Sparse factorization of the interior stiffness block failed."""


class BoundaryNodeRequested(PoissonLabError):
    """Operation requires an interior node."""


class IllConditioned(PoissonLabError):
    """Least-squares system rank deficient beyond the regularization."""


class InfeasibleTrace(PoissonLabError):
    """Requested Hessian has a nonzero g-trace; no harmonic function fits."""


class TargetNotHarmonic(UserWarning):
    """Fit target fails local discrete harmonicity; results may be poor."""


class XInsideW(PoissonLabError):
    """Evaluation point must lie outside the source window."""


class RankDeficientGradients(PoissonLabError):
    """Too few independent gradients to determine a Jacobian."""


class RankDeficientStencil(PoissonLabError):
    """Quadratic-fit stencil does not determine all six coefficients."""


class AmbiguousMatch(UserWarning):
    """Two candidate triangles match equally well but disagree in position."""


class NullspaceNotOneDim(PoissonLabError):
    """Stacked Hessians do not leave a one-dimensional nullspace."""


class NotPositiveDefinite(PoissonLabError):
    """Recovered symmetric matrix is indefinite after sign fixing."""


class LargeCurlResidual(PoissonLabError):
    """Conjugate 1-form is far from closed; input insufficiently harmonic."""


class NotConformalAtTolerance(PoissonLabError):
    """Pulled-back metric in the candidate chart is not conformal."""


class DegenerateTangent(PoissonLabError):
    """Boundary tangent vector has vanishing length."""


class NewtonDiverged(PoissonLabError):
    """Newton iteration failed to contract."""


class SingularLinearization(PoissonLabError):
    """Linearized operator could not be factorized."""


class ProbeOutsideSmallData(PoissonLabError):
    """Probe state (c, sigma) exceeds the small-data radius."""


class CutoffOverlap(PoissonLabError):
    """Probe cutoff support touches the source window or the boundary."""


class ConfigError(PoissonLabError):
    """Scenario configuration is malformed."""


class MissingBaseline(PoissonLabError):
    """Baseline file required for comparison does not exist."""
