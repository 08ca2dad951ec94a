"""Metric fields, Christoffel symbols, diffeomorphisms and the symmetric-matrix space.

Conventions
-----------
* A metric field evaluates to the covariant components ``g_ab``; points are
  numpy arrays of shape ``(n,)`` or batches ``(..., n)``.
* Derivative arrays are indexed ``dg[..., a, b, c] = d g_ab / d x_c``.
* Christoffel symbols are indexed ``gamma[k, a, b]`` (symmetric in ``a, b``).
* Symmetric matrices are vectorized with off-diagonal entries scaled by
  ``sqrt(2)`` so the Euclidean inner product of vectors equals the
  Hilbert-Schmidt inner product ``<A, B> = Tr(A^T B)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DependentInputs,
    NonPositiveConformalFactor,
    NonSpdMetric,
    SingularJacobian,
)

FD_STEP = 1e-5  # central-difference step for sampled metric derivatives


def _fd_deriv(fn, x, h=FD_STEP):
    """Central finite differences of a (..., n) -> (..., n, n) field."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    base = fn(x)
    out = np.zeros(base.shape + (n,))
    for c in range(n):
        e = np.zeros_like(x)
        e[..., c] = h
        out[..., c] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return out


@dataclass(frozen=True)
class MetricField:
    """Smooth SPD matrix field with first derivatives.

    Parameters
    ----------
    dim : int
        Spatial dimension (2 or 3).
    eval : callable
        Maps points ``(..., dim)`` to matrices ``(..., dim, dim)``.
    eval_deriv : callable
        Maps points to ``(..., dim, dim, dim)`` with the last axis the
        differentiation index.
    provenance : str
        ``"analytic"`` or ``"finite-difference"``.
    lambda_min : float
        SPD floor checked on demand.
    """

    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    eval_deriv: Callable[[np.ndarray], np.ndarray]
    provenance: str = "analytic"
    lambda_min: float = 1e-10
    name: str = ""

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))

    def inverse(self, x):
        return np.linalg.inv(self(x))

    def sqrt_det(self, x):
        return np.sqrt(np.linalg.det(self(x)))

    def check_spd(self, x):
        """Raise NonSpdMetric unless g(x) is symmetric with eigenvalues >= lambda_min."""
        g = self(x)
        if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-12):
            raise NonSpdMetric("metric not symmetric at %r" % (x,))
        w = np.linalg.eigvalsh(g)
        if np.min(w) < self.lambda_min:
            raise NonSpdMetric(
                "metric eigenvalue %g below floor %g at %r" % (np.min(w), self.lambda_min, x)
            )
        return g


def metric_from_callable(dim, fn, deriv=None, name=""):
    """Build a MetricField; derivatives fall back to central differences."""
    if deriv is not None:
        return MetricField(dim, fn, deriv, provenance="analytic", name=name)
    return MetricField(
        dim, fn, lambda x: _fd_deriv(fn, x), provenance="finite-difference", name=name
    )


def euclidean_metric(dim=2):
    eye = np.eye(dim)

    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim)).copy()

    def dv(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return MetricField(dim, ev, dv, name="euclidean%dd" % dim)


def constant_metric(matrix):
    """Constant SPD metric; derivatives vanish identically."""
    m = np.asarray(matrix, dtype=float)
    dim = m.shape[0]

    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(m, x.shape[:-1] + (dim, dim)).copy()

    def dv(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return MetricField(dim, ev, dv, name="constant")


def conformal_metric(dim, factor, factor_grad=None, base=None, name="conformal"):
    """Metric ``lam(x) * g0(x)`` for a positive scalar field ``lam``.

    ``factor`` maps ``(..., dim) -> (...,)``; ``factor_grad`` its gradient
    ``(..., dim)``.  Derivatives use the product rule when both the factor
    gradient and the base derivatives are analytic.
    """
    g0 = base if base is not None else euclidean_metric(dim)
    if factor_grad is None:
        fg = lambda x: _fd_deriv(lambda y: factor(y)[..., None], x)[..., 0, :]
        prov = "finite-difference"
    else:
        fg = factor_grad
        prov = g0.provenance

    def ev(x):
        x = np.asarray(x, dtype=float)
        return factor(x)[..., None, None] * g0(x)

    def dv(x):
        x = np.asarray(x, dtype=float)
        lam = factor(x)[..., None, None, None]
        dlam = fg(x)[..., None, None, :]
        return lam * g0.eval_deriv(x) + dlam * g0(x)[..., :, :, None]

    return MetricField(dim, ev, dv, provenance=prov, name=name)


def exp_conformal_metric(alpha=2.0, axis=0, dim=2):
    """``g = exp(alpha * x_axis) * I``: the standard curved test metric."""

    def factor(x):
        return np.exp(alpha * np.asarray(x, dtype=float)[..., axis])

    def grad(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., axis] = alpha * np.exp(alpha * x[..., axis])
        return out

    return conformal_metric(dim, factor, grad, name="exp_conformal_a%g" % alpha)


@dataclass(frozen=True)
class ChristoffelData:
    """Christoffel symbols at a point: ``gamma[k, a, b]`` and ``contracted[a]``."""

    gamma: np.ndarray
    contracted: np.ndarray


def christoffel(metric: MetricField, x) -> ChristoffelData:
    """Christoffel symbols of ``metric`` at point ``x``.

    ``gamma[k, a, b] = 1/2 g^{kl} (d_a g_bl + d_b g_al - d_l g_ab)`` and the
    lowered contraction ``contracted[a] = g_ak g^{bc} gamma[k, b, c]``.
    """
    g = metric.check_spd(x)
    dg = metric.eval_deriv(np.asarray(x, dtype=float))
    ginv = np.linalg.inv(g)
    # dg[a, b, c] = d_c g_ab, so term[l, a, b] = d_a g_bl + d_b g_al - d_l g_ab
    term = (
        np.einsum("bla->lab", dg)
        + np.einsum("alb->lab", dg)
        - np.einsum("abl->lab", dg)
    )
    gamma = 0.5 * np.einsum("kl,lab->kab", ginv, term)
    contracted = np.einsum("ak,bc,kbc->a", g, ginv, gamma)
    return ChristoffelData(gamma=gamma, contracted=contracted)


def christoffel_field(metric: MetricField, points):
    """Batched Christoffel symbols: returns gamma of shape (..., k, a, b)."""
    pts = np.asarray(points, dtype=float)
    g = metric(pts)
    dg = metric.eval_deriv(pts)
    ginv = np.linalg.inv(g)
    term = (
        np.einsum("...bla->...lab", dg)
        + np.einsum("...alb->...lab", dg)
        - np.einsum("...abl->...lab", dg)
    )
    return 0.5 * np.einsum("...kl,...lab->...kab", ginv, term)


def contracted_christoffel_scaling_check(metric: MetricField, lam, x) -> float:
    """Residual of the conformal-scaling identity for contracted symbols.

    For ``lam`` a positive scalar field, returns the max-norm of
    ``Gamma_a(lam*g) - Gamma_a(g) + (n-2)/2 * d_a log(lam)`` at ``x``.
    The identity is exact, so the residual is limited only by derivative
    accuracy; at ``n = 2`` the gradient term vanishes.
    """
    value, grad = lam.value, lam.grad
    lx = float(value(np.asarray(x, dtype=float)))
    if lx <= 0:
        raise NonPositiveConformalFactor("lam(x) = %g" % lx)
    n = metric.dim
    scaled = conformal_metric(n, value, grad, base=metric, name="scaled")
    ga = christoffel(metric, x).contracted
    gas = christoffel(scaled, x).contracted
    dloglam = np.asarray(grad(np.asarray(x, dtype=float))) / lx
    return float(np.max(np.abs(gas - ga + 0.5 * (n - 2) * dloglam)))


@dataclass(frozen=True)
class ScalarField:
    """Positive scalar field with gradient, for conformal factors."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]

    @staticmethod
    def from_callable(fn, grad=None):
        if grad is None:
            grad = lambda x: _fd_deriv(lambda y: np.asarray(fn(y))[..., None], x)[..., 0, :]
        return ScalarField(fn, grad)


# ---------------------------------------------------------------------------
# Symmetric-matrix space
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class SymSpace:
    """Inner-product space of symmetric n x n matrices.

    Vectorization scales off-diagonal entries by sqrt(2), making the
    Euclidean inner product of vectors equal to the Hilbert-Schmidt inner
    product of matrices.
    """

    n: int
    pairs: tuple = field(init=False)

    def __post_init__(self):
        p = [(i, i) for i in range(self.n)]
        p += [(i, j) for i in range(self.n) for j in range(i + 1, self.n)]
        object.__setattr__(self, "pairs", tuple(p))

    @property
    def dim_sym(self):
        return self.n * (self.n + 1) // 2

    def vec(self, m):
        m = np.asarray(m, dtype=float)
        out = np.empty(self.dim_sym)
        for idx, (i, j) in enumerate(self.pairs):
            out[idx] = m[i, j] if i == j else _SQRT2 * m[i, j]
        return out

    def unvec(self, v):
        v = np.asarray(v, dtype=float)
        m = np.zeros((self.n, self.n))
        for idx, (i, j) in enumerate(self.pairs):
            if i == j:
                m[i, i] = v[idx]
            else:
                m[i, j] = m[j, i] = v[idx] / _SQRT2
        return m

    def basis(self):
        """Orthonormal (HS) basis matrices in vectorization order."""
        return [self.unvec(e) for e in np.eye(self.dim_sym)]

    @staticmethod
    def hs_inner(a, b):
        return float(np.sum(np.asarray(a) * np.asarray(b)))


def hodge_star_sym(space: SymSpace, matrices) -> np.ndarray:
    """Unit-norm symmetric matrix orthogonal to ``m = dim_sym - 1`` inputs.

    Implemented as the generalized cross product (cofactor expansion of the
    stacked vectorizations), which realizes the wedge-then-star construction
    directly rather than through an SVD.  The sign is fixed so the result has
    nonnegative trace; if the trace vanishes, the first nonzero vectorized
    entry is made positive.
    """
    m = space.dim_sym - 1
    mats = list(matrices)
    if len(mats) != m:
        raise DependentInputs("need exactly %d matrices, got %d" % (m, len(mats)))
    v = np.stack([space.vec(a) for a in mats])  # (m, m+1)
    svals = np.linalg.svd(v, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise DependentInputs(
            "inputs dependent: singular values %s" % np.array2string(svals, precision=3)
        )
    w = np.empty(m + 1)
    cols = np.arange(m + 1)
    for i in range(m + 1):
        minor = v[:, cols != i]
        w[i] = (-1.0) ** i * np.linalg.det(minor)
    w /= np.linalg.norm(w)
    out = space.unvec(w)
    tr = np.trace(out)
    if tr < 0:
        out = -out
    elif abs(tr) < 1e-14:
        wv = space.vec(out)
        nz = np.nonzero(np.abs(wv) > 1e-14)[0]
        if nz.size and wv[nz[0]] < 0:
            out = -out
    return out


# ---------------------------------------------------------------------------
# Diffeomorphisms and pullbacks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diffeo:
    """Smooth map with Jacobian; inverse defaults to a Newton solve."""

    forward: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    inverse_fn: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __call__(self, x):
        return self.forward(np.asarray(x, dtype=float))

    def inverse(self, y, tol=1e-13, maxiter=60):
        if self.inverse_fn is not None:
            return self.inverse_fn(np.asarray(y, dtype=float))
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(maxiter):
            r = self(x) - y
            if np.max(np.abs(r)) < tol:
                return x
            jac = self.jacobian(x)
            try:
                step = np.linalg.solve(jac, r[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularJacobian(str(exc)) from exc
            x = x - step
        return x

    def inverted(self):
        """Diffeo representing the inverse map."""
        fwd = lambda y: self.inverse(y)
        jac = lambda y: np.linalg.inv(self.jacobian(self.inverse(y)))
        return Diffeo(fwd, jac, inverse_fn=self.forward, name=self.name + "^-1")

    @staticmethod
    def identity():
        return Diffeo(
            lambda x: np.asarray(x, dtype=float).copy(),
            lambda x: np.broadcast_to(
                np.eye(np.asarray(x).shape[-1]),
                np.asarray(x).shape[:-1] + (np.asarray(x).shape[-1],) * 2,
            ).copy(),
            inverse_fn=lambda y: np.asarray(y, dtype=float).copy(),
            name="identity",
        )

    @staticmethod
    def compose(outer, inner):
        """outer after inner."""
        return Diffeo(
            lambda x: outer(inner(x)),
            lambda x: outer.jacobian(inner(x)) @ inner.jacobian(x),
            name="%s.%s" % (outer.name, inner.name),
        )


def radial_disk_map(a=0.2):
    """Boundary-fixing radial map of the unit disk: r -> r + a*r*(1 - r).

    Bijective for ``|a| < 1/3`` (radial derivative ``1 + a - 2ar`` stays
    positive).
    """

    def fwd(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        s = 1.0 + a * (1.0 - r)
        return x * s[..., None]

    def jac(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        eye = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        s = 1.0 + a * (1.0 - r)
        with np.errstate(invalid="ignore", divide="ignore"):
            rhat = np.where(r[..., None] > 0, x / np.maximum(r, 1e-300)[..., None], 0.0)
        outer = rhat[..., :, None] * rhat[..., None, :]
        return s[..., None, None] * eye - (a * r)[..., None, None] * outer

    return Diffeo(fwd, jac, name="radial_a%g" % a)


def twist_disk_map(b=0.5):
    """Boundary-fixing rotation by angle ``b*(1 - r^2)``; smooth at the origin."""

    def angle(r2):
        return b * (1.0 - r2)

    def fwd(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        t = angle(r2)
        c, s = np.cos(t), np.sin(t)
        return np.stack(
            [c * x[..., 0] - s * x[..., 1], s * x[..., 0] + c * x[..., 1]], axis=-1
        )

    def jac(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        t = angle(r2)
        c, s = np.cos(t), np.sin(t)
        rot = np.stack(
            [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2
        )
        # d/dx of the rotation angle contributes (dR/dt) x (dt/dx)^T
        drot = np.stack(
            [np.stack([-s, -c], axis=-1), np.stack([c, -s], axis=-1)], axis=-2
        )
        dt = -2.0 * b * x
        rx = np.einsum("...ij,...j->...i", drot, x)
        return rot + rx[..., :, None] * dt[..., None, :]

    return Diffeo(fwd, jac, name="twist_b%g" % b)


def shift_disk_map(c=0.15, direction=(1.0, 0.0)):
    """Boundary-fixing translation field ``x + c*(1-r^2)^2 * v``."""
    v = np.asarray(direction, dtype=float)

    def bump(r2):
        return (1.0 - r2) ** 2

    def fwd(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return x + c * bump(r2)[..., None] * v

    def jac(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        dbump = -4.0 * (1.0 - r2)[..., None] * x  # gradient of (1-r^2)^2
        eye = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        return eye + c * v[:, None] * dbump[..., None, :]

    return Diffeo(fwd, jac, name="shift_c%g" % c)


def pullback_metric(metric: MetricField, diffeo: Diffeo) -> MetricField:
    """Pullback ``(phi^* g)(x) = Dphi(x)^T g(phi(x)) Dphi(x)``.

    Derivatives of the pulled-back field are sampled by central differences
    (the composite formula needs second derivatives of the map, which Diffeo
    does not carry).
    """

    def ev(x):
        x = np.asarray(x, dtype=float)
        jac = diffeo.jacobian(x)
        dets = np.linalg.det(jac)
        if np.any(np.abs(dets) < 1e-14):
            raise SingularJacobian("pullback at %r" % (x,))
        gy = metric(diffeo(x))
        return np.swapaxes(jac, -1, -2) @ gy @ jac

    return MetricField(
        metric.dim,
        ev,
        lambda x: _fd_deriv(ev, x),
        provenance="finite-difference",
        name="pullback(%s,%s)" % (metric.name, diffeo.name),
    )
