"""Weighted local quadratic fits: the jet readout shared by all modules.

P1 fields have no pointwise second derivatives, so values, gradients and
Hessians at a point are always read through the same weighted least-squares
quadratic over a node stencil.  The fit is exact on quadratics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankDeficientStencil


@dataclass(frozen=True)
class QuadraticFit:
    """Value, gradient and Hessian of a nodal field at a point."""

    point: np.ndarray
    value: float
    grad: np.ndarray
    hess: np.ndarray
    residual: float
    stencil_radius: float

    @property
    def jet(self):
        """Flat jet vector (value, g1, g2, H11, H12, H22)."""
        return np.array(
            [
                self.value,
                self.grad[0],
                self.grad[1],
                self.hess[0, 0],
                self.hess[0, 1],
                self.hess[1, 1],
            ]
        )


def _design(points, center):
    d = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    dx, dy = d[:, 0], d[:, 1]
    return np.column_stack(
        [np.ones_like(dx), dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy]
    )


def fit_matrix(points, center, weights=None):
    """Linear map from stencil values to jet coefficients.

    Returns ``M`` of shape (6, m) so that ``M @ values`` gives
    ``(value, g1, g2, H11, H12, H22)`` of the weighted least-squares
    quadratic through the stencil.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 6:
        raise RankDeficientStencil("need at least 6 stencil nodes, got %d" % pts.shape[0])
    phi = _design(pts, center)
    if weights is None:
        w = np.ones(pts.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    a = phi * sw[:, None]
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-1] <= 1e-12 * s[0]:
        raise RankDeficientStencil(
            "stencil does not determine a quadratic (cond %.2e)" % (s[0] / max(s[-1], 1e-300))
        )
    pinv = (vt.T * (1.0 / s)) @ u.T
    return pinv * sw[None, :]


def gaussian_weights(points, center, radius):
    d = np.linalg.norm(np.asarray(points, dtype=float) - np.asarray(center), axis=1)
    rho = max(radius, 1e-12) / 1.5
    return np.exp(-((d / rho) ** 2))


def quadratic_fit(points, values, center, weights=None, radius=None) -> QuadraticFit:
    """Fit a quadratic to (points, values) around center; read its 2-jet."""
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    if radius is None:
        radius = float(np.max(np.linalg.norm(pts - np.asarray(center), axis=1)))
    if weights is None:
        weights = gaussian_weights(pts, center, radius)
    m = fit_matrix(pts, center, weights)
    beta = m @ vals
    phi = _design(pts, center)
    resid = float(np.sqrt(np.average((phi @ beta - vals) ** 2, weights=weights)))
    hess = np.array([[beta[3], beta[4]], [beta[4], beta[5]]])
    return QuadraticFit(
        point=np.asarray(center, dtype=float),
        value=float(beta[0]),
        grad=beta[1:3].copy(),
        hess=hess,
        residual=resid,
        stencil_radius=float(radius),
    )
