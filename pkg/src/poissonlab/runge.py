"""Regularized least-squares control of boundary and interior-source data.

Density of global solutions among local ones justifies asking for local
targets (point separation, prescribed gradients, prescribed trace-free
2-jets); the control problem itself is exponentially ill-posed, so every
fit goes through a fixed Tikhonov schedule with a truncated-SVD fallback
and residuals are reported, never asserted against an analytic rate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .errors import IllConditioned, InfeasibleTrace, TargetNotHarmonic, XInsideW
from .fitting import gaussian_weights, fit_matrix
from .geometry import christoffel
from .harmonic import HarmonicSolver
from .mesh import Grid, TriMesh

REG_SCALE = 1e-10       # Tikhonov weight relative to the Gram norm
TSVD_COND = 1e12        # condition number that triggers the truncated-SVD fallback
JET_TOL_C = 1.0         # tol_jet = max(1e-3, JET_TOL_C * h), relative per component
JET_FIT_RADIUS = 3.0    # jet stencil radius in units of h


@dataclass(frozen=True)
class SourceBasis:
    """Finite family of boundary data or interior sources used for control.

    kind        'fourier' on the full circle, 'hat' on a partial arc,
                'window' for interior sources
    F           (nb, K) boundary-data columns in boundary-loop order, or
                (nv, K) nodal load columns for kind='window'
    col_scale   per-column weights approximating an L2 pairing
    col_penalty per-column Tikhonov weights; grows with mode frequency so
                underdetermined fits pick the smooth representative
    support     node indices carrying the window sources (window kind only)
    """

    kind: str
    F: np.ndarray
    col_scale: np.ndarray
    col_penalty: np.ndarray = None
    support: np.ndarray | None = None

    def __post_init__(self):
        if self.col_penalty is None:
            object.__setattr__(self, "col_penalty", np.ones(self.F.shape[1]))

    @property
    def K(self):
        return self.F.shape[1]

    def subset(self, cols):
        cols = np.asarray(cols)
        return SourceBasis(
            kind=self.kind,
            F=self.F[:, cols],
            col_scale=self.col_scale[cols],
            col_penalty=self.col_penalty[cols],
            support=self.support,
        )


def fourier_basis(mesh: TriMesh, K) -> SourceBasis:
    """Low-frequency Fourier modes on the full boundary circle.

    Columns are 1, cos t, sin t, cos 2t, ... evaluated at boundary nodes;
    requires the whole boundary to be marked as data arc.
    """
    if not np.all(mesh.gamma_mask):
        raise ValueError("fourier basis needs the full circle as data arc")
    th = np.arctan2(
        mesh.nodes[mesh.boundary_loop, 1], mesh.nodes[mesh.boundary_loop, 0]
    )
    cols = [np.ones_like(th)]
    modes = [0]
    k = 1
    while len(cols) < K:
        cols.append(np.cos(k * th))
        modes.append(k)
        if len(cols) < K:
            cols.append(np.sin(k * th))
            modes.append(k)
        k += 1
    F = np.column_stack(cols[:K])
    penalty = (1.0 + np.asarray(modes[:K], dtype=float)) ** 2
    return SourceBasis(kind="fourier", F=F, col_scale=np.ones(K), col_penalty=penalty)


def hat_basis(mesh: TriMesh, K, bdry_lumped_mass=None) -> SourceBasis:
    """Nodal hat functions at K evenly spaced data-arc nodes."""
    gamma_nodes = np.nonzero(mesh.gamma_mask)[0]
    if gamma_nodes.size < K:
        K = gamma_nodes.size
    picks = gamma_nodes[np.linspace(0, gamma_nodes.size - 1, K).round().astype(int)]
    picks = np.unique(picks)
    F = np.zeros((mesh.nb, picks.size))
    F[picks, np.arange(picks.size)] = 1.0
    if bdry_lumped_mass is not None:
        scale = np.sqrt(bdry_lumped_mass[picks])
    else:
        scale = np.ones(picks.size)
    return SourceBasis(kind="hat", F=F, col_scale=scale)


def default_basis(solver: HarmonicSolver, K) -> SourceBasis:
    if np.all(solver.mesh.gamma_mask):
        return fourier_basis(solver.mesh, K)
    return hat_basis(solver.mesh, K, solver.assembly.M_bdry_lumped)


def window_basis(mesh: TriMesh, w_nodes, K) -> SourceBasis:
    """Unit nodal loads at K evenly spaced interior window nodes."""
    w_nodes = np.asarray(w_nodes)
    w_nodes = w_nodes[~mesh.is_boundary[w_nodes]]
    if w_nodes.size == 0:
        raise ValueError("window contains no interior nodes")
    K = min(K, w_nodes.size)
    picks = w_nodes[np.linspace(0, w_nodes.size - 1, K).round().astype(int)]
    picks = np.unique(picks)
    F = np.zeros((mesh.nv, picks.size))
    F[picks, np.arange(picks.size)] = 1.0
    return SourceBasis(kind="window", F=F, col_scale=np.ones(picks.size), support=picks)


def _tikhonov_lstsq(a, b, weights=None, reg_scale=REG_SCALE):
    """Weighted Tikhonov least squares with truncated-SVD fallback.

    Returns (coeffs, residual_norm_weighted, condition_number).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        a = a * sw[:, None]
        b = b * sw
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        raise IllConditioned("zero design matrix")
    cond = s[0] / max(s[-1], 1e-300)
    reg = reg_scale * s[0] ** 2
    filt = s / (s * s + reg)
    if cond > TSVD_COND:
        filt = np.where(s > s[0] / TSVD_COND, 1.0 / np.maximum(s, 1e-300), 0.0)
        if not np.any(filt > 0):
            raise IllConditioned("all singular values truncated")
    c = vt.T @ (filt * (u.T @ b))
    resid = float(np.linalg.norm(a @ c - b))
    return c, resid, cond


@dataclass(frozen=True)
class FitResult:
    coeffs: np.ndarray
    residual: float       # relative weighted L2 on the subdomain
    condition: float
    field: np.ndarray     # fitted combination on all nodes


def fit_local_solution(
    solver: HarmonicSolver, basis: SourceBasis, target, u_nodes, reg_scale=REG_SCALE
) -> FitResult:
    """Least-squares match of a local field by global solutions.

    ``target`` holds nodal values aligned with ``u_nodes``.  The caller
    asserts that the subdomain is compactly interior with connected
    complement; a warning fires when the target is detectably far from
    discrete-harmonic on the subdomain.
    """
    u_nodes = np.asarray(u_nodes)
    target = np.asarray(target, dtype=float)
    full_target = np.zeros(solver.mesh.nv)
    full_target[u_nodes] = target
    inner = _nodes_with_interior_stencil(solver.mesh, u_nodes)
    if inner.size:
        est = solver.laplacian_estimate(full_target, inner)
        scale = max(float(np.max(np.abs(target))), 1e-12)
        if est > 10.0 * solver.h * scale:
            warnings.warn(
                "target Laplacian estimate %.2e exceeds harmonic tolerance" % est,
                TargetNotHarmonic,
                stacklevel=2,
            )
    fields = solver.solve_many(basis.F)
    a = fields[u_nodes]
    w = solver.assembly.M_lumped[u_nodes]
    c, _, cond = _tikhonov_lstsq(a, target, weights=w, reg_scale=reg_scale)
    num = np.sqrt(np.sum(w * (a @ c - target) ** 2))
    den = max(np.sqrt(np.sum(w * target**2)), 1e-300)
    return FitResult(coeffs=c, residual=float(num / den), condition=cond, field=fields @ c)


def _nodes_with_interior_stencil(mesh: TriMesh, u_nodes):
    """Subset of u_nodes whose full stiffness stencil lies inside u_nodes."""
    inset = np.zeros(mesh.nv, dtype=bool)
    inset[u_nodes] = True
    ok = inset.copy()
    for tri in mesh.triangles:
        if not inset[tri].all():
            ok[tri] = False
    keep = np.nonzero(ok & ~mesh.is_boundary)[0]
    return keep


@dataclass(frozen=True)
class Jet2Target:
    """Target 2-jet: value, covector and g-trace-free covariant Hessian."""

    point: np.ndarray
    a0: float
    xi0: np.ndarray
    H0: np.ndarray

    @property
    def vector(self):
        return np.array(
            [self.a0, self.xi0[0], self.xi0[1], self.H0[0, 0], self.H0[0, 1], self.H0[1, 1]]
        )

    @property
    def scale(self):
        return max(
            abs(self.a0),
            float(np.max(np.abs(self.xi0), initial=0.0)),
            float(np.max(np.abs(self.H0), initial=0.0)),
            1e-12,
        )


def make_tracefree(metric, point, H) -> np.ndarray:
    """Project a symmetric matrix onto the g-trace-free subspace at a point."""
    ginv = metric.inverse(np.asarray(point, dtype=float))
    h = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    t = np.sum(ginv * h) / np.sum(ginv * ginv)
    return h - t * ginv


@dataclass(frozen=True)
class JetResult:
    f: np.ndarray            # boundary data realizing the jet
    coeffs: np.ndarray
    achieved: np.ndarray     # (value, g1, g2, H11, H12, H22), covariant Hessian
    target: np.ndarray
    rel_errors: np.ndarray   # per-component |achieved - target| / target scale
    field: np.ndarray
    condition: float

    @property
    def max_rel_error(self):
        return float(np.max(self.rel_errors))


def jet_tolerance(h):
    return max(1e-3, JET_TOL_C * h)


def _jet_matrix(solver: HarmonicSolver, basis: SourceBasis, point, radius):
    """(6, K) map from basis coefficients to covariant 2-jets at the point."""
    mesh = solver.mesh
    stencil = mesh.nodes_within(point, radius)
    stencil = stencil[~mesh.is_boundary[stencil]]
    if stencil.size < 12:
        stencil = mesh.nodes_within(point, 2 * radius)
        stencil = stencil[~mesh.is_boundary[stencil]]
    pts = mesh.nodes[stencil]
    w = gaussian_weights(pts, point, radius)
    fitmat = fit_matrix(pts, point, w)  # (6, |S|)
    fields = solver.solve_many(basis.F)
    jets = fitmat @ fields[stencil]  # (6, K)
    gamma = christoffel(solver.metric, point).gamma  # (2,2,2) [k,a,b]
    # covariant Hessian: subtract Gamma^k_ab * d_k u from the coordinate Hessian
    corr = np.einsum("kab,kn->abn", gamma, jets[1:3])
    jets[3] -= corr[0, 0]
    jets[4] -= corr[0, 1]
    jets[5] -= corr[1, 1]
    return jets, fields


def prescribe_jet(
    solver: HarmonicSolver, basis: SourceBasis, target: Jet2Target, reg_scale=REG_SCALE
) -> JetResult:
    """Boundary data whose harmonic extension hits a prescribed 2-jet.

    The Hessian component of the jet is covariant, so only g-trace-free
    targets are feasible; others are rejected.  The achieved jet is read by
    the same local quadratic fit used by the recovery modules.
    """
    p = np.asarray(target.point, dtype=float)
    h = solver.h
    bdist = np.min(np.linalg.norm(solver.mesh.nodes[solver.boundary] - p, axis=1))
    if bdist < 3 * h:
        raise ValueError("jet point must keep distance >= 3h from the boundary")
    ginv = solver.metric.inverse(p)
    hnorm = float(np.linalg.norm(target.H0))
    if hnorm > 0 and abs(np.sum(ginv * target.H0)) > 1e-6 * hnorm:
        raise InfeasibleTrace(
            "H0 has g-trace %.3e; harmonic Hessians are trace-free"
            % float(np.sum(ginv * target.H0))
        )
    jets, fields = _jet_matrix(solver, basis, p, JET_FIT_RADIUS * h)
    t = target.vector
    # frequency-weighted Tikhonov: substituting c = d / penalty keeps the
    # jet equations intact while the minimum-norm step favors smooth modes
    pen = basis.col_penalty
    d, _, cond = _tikhonov_lstsq(jets / pen[None, :], t, reg_scale=reg_scale)
    c = d / pen
    achieved = jets @ c
    rel = np.abs(achieved - t) / target.scale
    return JetResult(
        f=basis.F @ c,
        coeffs=c,
        achieved=achieved,
        target=t,
        rel_errors=rel,
        field=fields @ c,
        condition=cond,
    )


def separate_points(solver: HarmonicSolver, basis: SourceBasis, x, y):
    """Basis combination maximizing |u_f(x) - u_f(y)| at unit coefficient norm.

    The functional is rank one, so the maximizer is the normalized
    difference of embedding rows (a one-step power iteration).
    """
    x, y = int(x), int(y)
    if x == y:
        raise ValueError("x and y must be distinct nodes")
    if solver.mesh.is_boundary[x]:
        raise ValueError("x must be an interior node")
    fields = solver.solve_many(basis.F)
    a = fields[x] - fields[y]
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return np.zeros(solver.mesh.nb), 0.0
    c = a / norm
    return basis.F @ c, norm


@dataclass(frozen=True)
class InteriorSourceResult:
    source: np.ndarray        # grid field, supported in the window
    coeffs: np.ndarray
    achieved_grad: np.ndarray
    field: np.ndarray         # solution on the grid


def prescribe_gradient_interior_source(
    grid: Grid, L, w_mask, x_node, v, reg_scale=REG_SCALE, exclude_radius=0.0
) -> InteriorSourceResult:
    """Source supported in the window so the zero-Dirichlet solution of
    ``L u = f`` has a prescribed gradient at a grid node.

    ``L`` is a sparse operator on interior nodes (row/column order =
    flattened interior).  ``w_mask`` is a boolean window mask over grid
    nodes; ``x_node`` an (i, j) interior node outside the window.
    """
    shape = grid.shape
    interior = grid.interior_mask()
    idx = -np.ones(shape, dtype=np.int64)
    idx[interior] = np.arange(int(interior.sum()))
    i0, j0 = x_node
    if not interior[i0, j0]:
        raise XInsideW("x must be an interior node")
    w_use = w_mask & interior
    if exclude_radius > 0.0:
        xy = grid.coords()
        d = np.linalg.norm(xy - xy[i0, j0], axis=-1)
        w_use = w_use & (d > exclude_radius)
    if w_use[i0, j0]:
        raise XInsideW("x lies inside the source window; shrink the window first")
    if not np.any(w_use):
        raise IllConditioned("empty source window")

    lu = spla.splu(L.tocsc())
    w_cols = idx[w_use]
    rhs = np.zeros((int(interior.sum()), w_cols.size))
    rhs[w_cols, np.arange(w_cols.size)] = 1.0
    sols = lu.solve(rhs)  # (n_int, K)

    h = grid.h
    full = np.zeros(shape + (w_cols.size,))
    full[interior] = sols
    gx = (full[i0 + 1, j0] - full[i0 - 1, j0]) / (2 * h)
    gy = (full[i0, j0 + 1] - full[i0, j0 - 1]) / (2 * h)
    d = np.stack([gx, gy], axis=1)  # (K, 2)
    v = np.asarray(v, dtype=float)

    if np.linalg.norm(v) == 0.0:
        c = np.zeros(w_cols.size)
    else:
        # minimum-norm coefficients subject to d^T c = v, Tikhonov-regularized
        gram = d.T @ d
        reg = reg_scale * max(np.trace(gram), 1e-300)
        try:
            lam = np.linalg.solve(gram + reg * np.eye(2), v)
        except np.linalg.LinAlgError as exc:
            raise IllConditioned(str(exc)) from exc
        c = d @ lam
    achieved = d.T @ c
    source = np.zeros(shape)
    source[w_use] = c
    field = np.zeros(shape)
    field[interior] = sols @ c
    return InteriorSourceResult(
        source=source, coeffs=c, achieved_grad=achieved, field=field
    )
