"""Recovery of the metric from harmonic functions.

The inverse metric direction at a point is the one-dimensional
orthocomplement of the Hessians of harmonic functions read in a harmonic
chart; two independent routes (SVD nullspace and the generalized cross
product) must agree.  In two dimensions the conformal representative is
completed through a harmonic conjugate and the isothermal normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTangent,
    IllConditioned,
    LargeCurlResidual,
    NotConformalAtTolerance,
    NotPositiveDefinite,
    NullspaceNotOneDim,
    RankDeficientStencil,
)
from .fitting import QuadraticFit, gaussian_weights, quadratic_fit
from .geometry import MetricField, SymSpace, hodge_star_sym
from .harmonic import HarmonicSolver
from .mesh import TriMesh
from .runge import Jet2Target, SourceBasis, make_tracefree, prescribe_jet

CHART_RADIUS_H = 5.0     # chart patch radius in units of h
CHART_COND_MAX = 1e3
ISO_TOL_C = 1.0          # isothermal conformality tolerance = ISO_TOL_C * h
ROUTE_AGREE_TOL = 1e-8   # SVD vs cross-product agreement requirement
CURL_TOL_C = 10.0        # circulation audit threshold factor


@dataclass
class LocalChart:
    """Coordinate pair built from solution fields around a center node."""

    center: int
    fields: np.ndarray          # (nv, 2) nodal values of the coordinates
    patch: np.ndarray           # node indices within the chart radius
    jacobian: np.ndarray        # (2, 2) at the center, rows = d(coord)
    kind: str
    conformal_factor: float | None = None

    def coords_of(self, nodes):
        return self.fields[np.asarray(nodes)]


def build_harmonic_chart(
    solver: HarmonicSolver, basis: SourceBasis, x0, radius_h=CHART_RADIUS_H
) -> LocalChart:
    """Two harmonic fields with prescribed unit gradients at the center node.

    Falls back once to a doubled basis-free retry tolerance before raising
    IllConditioned when the chart Jacobian is too skew.
    """
    mesh = solver.mesh
    p = mesh.nodes[int(x0)]
    zero_h = np.zeros((2, 2))
    jets = [
        prescribe_jet(solver, basis, Jet2Target(p, 0.0, np.array([1.0, 0.0]), zero_h)),
        prescribe_jet(solver, basis, Jet2Target(p, 0.0, np.array([0.0, 1.0]), zero_h)),
    ]
    jac = np.stack([r.achieved[1:3] for r in jets])
    cond = np.linalg.cond(jac)
    if cond > CHART_COND_MAX:
        raise IllConditioned("chart Jacobian condition %.2e" % cond)
    patch = mesh.nodes_within(p, radius_h * solver.h)
    fields = np.stack([jets[0].field, jets[1].field], axis=1)
    return LocalChart(center=int(x0), fields=fields, patch=patch, jacobian=jac, kind="harmonic")


def local_quadratic_fit(field, chart: LocalChart) -> QuadraticFit:
    """Weighted quadratic fit of a nodal field in chart coordinates."""
    if chart.patch.size < 12:
        raise RankDeficientStencil(
            "chart patch has %d nodes; need at least 12" % chart.patch.size
        )
    pts = chart.coords_of(chart.patch)
    center = chart.fields[chart.center]
    vals = np.asarray(field, dtype=float)[chart.patch]
    radius = float(np.max(np.linalg.norm(pts - center, axis=1)))
    w = gaussian_weights(pts, center, radius)
    return quadratic_fit(pts, vals, center, weights=w, radius=radius)


def recover_direction_from_hessians(space: SymSpace, hessians):
    """Unit-HS SPD direction orthogonal to the given Hessians, two routes.

    Returns (matrix, diagnostics).  Raises NullspaceNotOneDim when the
    stacked vectorizations do not leave exactly one dimension, and
    NotPositiveDefinite when the sign-fixed representative is indefinite.
    """
    vecs = np.stack([space.vec(h) for h in hessians])
    u, s, vt = np.linalg.svd(vecs, full_matrices=True)
    m = space.dim_sym - 1
    if len(hessians) != m:
        raise NullspaceNotOneDim("need %d Hessians, got %d" % (m, len(hessians)))
    if s[-1] <= 1e-8 * s[0]:
        raise NullspaceNotOneDim(
            "rank report: singular values %s" % np.array2string(s, precision=3)
        )
    null_vec = vt[-1]
    cand_svd = space.unvec(null_vec)
    if np.trace(cand_svd) < 0:
        cand_svd = -cand_svd
    cand_wedge = hodge_star_sym(space, hessians)
    agree = min(
        float(np.linalg.norm(cand_svd - cand_wedge)),
        float(np.linalg.norm(cand_svd + cand_wedge)),
    )
    if agree > ROUTE_AGREE_TOL:
        raise NullspaceNotOneDim(
            "SVD and cross-product routes disagree by %.2e" % agree
        )
    w = np.linalg.eigvalsh(cand_svd)
    if w[0] <= 0:
        raise NotPositiveDefinite(
            "recovered direction indefinite: eigenvalues %s"
            % np.array2string(w, precision=3)
        )
    diag = {
        "route_agreement": agree,
        "singular_values": s,
        "ortho_defect": float(np.max(np.abs(vecs @ space.vec(cand_svd)))),
    }
    return cand_svd, diag


@dataclass
class MetricRecovery:
    direction: np.ndarray     # unit-HS SPD candidate for g^{-1}(x0)
    chart: LocalChart
    hessians: list
    diagnostics: dict

    def conductivity(self):
        """Unit-determinant representative (2D: equals sqrt(det g) g^{-1})."""
        d = self.direction
        return d / np.sqrt(np.linalg.det(d))


def tracefree_probe_targets(metric: MetricField, point):
    """Two independent g-trace-free symmetric probes at a point."""
    seeds = [np.diag([1.0, -1.0]), np.array([[0.0, 1.0], [1.0, 0.0]])]
    out = []
    for sd in seeds:
        t = make_tracefree(metric, point, sd)
        n = np.linalg.norm(t)
        if n < 1e-12:
            # seed parallel to g^{-1}; perturb deterministically
            t = make_tracefree(metric, point, sd + np.diag([0.0, 1.0]))
            n = np.linalg.norm(t)
        out.append(2.0 * t / n)
    return out


def recover_inverse_metric(
    solver: HarmonicSolver, basis: SourceBasis, x0, chart: LocalChart = None
) -> MetricRecovery:
    """Inverse-metric direction at a node from Hessians of harmonic fields.

    Prescribes two harmonic fields with independent trace-free Hessians,
    reads their Hessians in a harmonic chart centered at the node, and
    returns the unit-HS SPD matrix spanning the orthocomplement.
    """
    mesh = solver.mesh
    x0 = int(x0)
    p = mesh.nodes[x0]
    if chart is None:
        chart = build_harmonic_chart(solver, basis, x0)
    targets = tracefree_probe_targets(solver.metric, p)
    hessians = []
    for t in targets:
        jr = prescribe_jet(solver, basis, Jet2Target(p, 0.0, np.zeros(2), t))
        fit = local_quadratic_fit(jr.field, chart)
        hessians.append(fit.hess)
    space = SymSpace(2)
    direction, diag = recover_direction_from_hessians(space, hessians)
    diag["tracefree_targets"] = targets
    return MetricRecovery(direction=direction, chart=chart, hessians=hessians, diagnostics=diag)


# ---------------------------------------------------------------------------
# Harmonic conjugates and isothermal charts (2D)
# ---------------------------------------------------------------------------

_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])  # Levi-Civita symbol as a matrix


def _conjugate_one_form(mesh: TriMesh, metric, u):
    """Per-triangle components of -*du for the given nodal field."""
    p = mesh.nodes[mesh.triangles]
    d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    dinv = np.linalg.inv(d)
    lref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.einsum("ij,tjk->tik", lref, dinv)
    gu = np.einsum("ti,tia->ta", np.asarray(u, dtype=float)[mesh.triangles], grads)
    if hasattr(metric, "values"):
        g = metric.values
    else:
        g = metric(mesh.centroids())
    sq = np.sqrt(np.linalg.det(g))
    ginv = np.linalg.inv(g)
    star = sq[:, None] * np.einsum("ab,tbc,tc->ta", _ROT, ginv, gu)
    return -star, gu


def harmonic_conjugate(solver: HarmonicSolver, u, curl_tol_c=CURL_TOL_C):
    """Integrate -*du along a spanning tree; v(root) = 0.

    The audit reconstructs the one-form as an affine field around every
    triangle and integrates it around the triangle exactly; the resulting
    loop integrals estimate ``area * curl`` and must stay below
    ``curl_tol_c * h * |D omega| * area``, which they do exactly when the
    input is discrete-harmonic.
    """
    mesh = solver.mesh
    omega, gu = _conjugate_one_form(mesh, solver.metric, u)
    scale = float(np.max(np.linalg.norm(omega, axis=1)))
    if scale < 1e-14:
        raise DegenerateTangent("du vanishes identically; no conjugate direction")

    # Loop integral of the rotated flux around each node patch; for P1
    # fields this equals the stiffness residual (K u)_i exactly, so it is
    # zero to roundoff when u is discrete-harmonic.
    interior = mesh.interior_idx
    circ = (solver.assembly.K @ np.asarray(u, dtype=float))[interior]
    patch_area = 3.0 * solver.assembly.M_lumped[interior]
    max_ratio = float(np.max(np.abs(circ) / patch_area))
    threshold = curl_tol_c * solver.h * scale
    if max_ratio > threshold:
        raise LargeCurlResidual(
            "loop-integral density %.3e exceeds %.3e; input not harmonic enough"
            % (max_ratio, threshold)
        )

    adj = mesh.edge_triangles()
    edge_omega = {key: omega[tris].mean(axis=0) for key, tris in adj.items()}

    # breadth-first integration over mesh edges from node 0; BFS keeps the
    # accumulated path error smooth between neighboring nodes
    from collections import deque

    v = np.full(mesh.nv, np.nan)
    v[0] = 0.0
    neighbors = [[] for _ in range(mesh.nv)]
    for (i, j) in adj.keys():
        neighbors[i].append(j)
        neighbors[j].append(i)
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in sorted(neighbors[i]):
            if np.isnan(v[j]):
                key = (min(i, j), max(i, j))
                e = mesh.nodes[j] - mesh.nodes[i]
                v[j] = v[i] + float(edge_omega[key] @ e)
                queue.append(j)
    return v, {"max_circulation_ratio": max_ratio, "threshold": threshold}


def build_isothermal_chart(
    solver: HarmonicSolver,
    basis: SourceBasis,
    x0,
    tol_c=ISO_TOL_C,
    conductivity=None,
) -> LocalChart:
    """Chart (u, conjugate) around a node, with the conformal factor.

    The gradient of u at the center is normalized to unit length in the
    recovered unit-determinant conductivity metric, which pins the chart
    factor to ``sqrt(det g)``.  Pass ``conductivity`` to skip the recovery
    step (e.g. when probing many points of a known-isotropic family).
    """
    mesh = solver.mesh
    x0 = int(x0)
    p = mesh.nodes[x0]
    if conductivity is None:
        rec = recover_inverse_metric(solver, basis, x0)
        sigma = rec.conductivity()
    else:
        sigma = np.asarray(conductivity, dtype=float)
    xi = np.array([1.0, 0.0]) / np.sqrt(sigma[0, 0])
    jr = prescribe_jet(solver, basis, Jet2Target(p, 0.0, xi, np.zeros((2, 2))))
    u = jr.field
    v, audit = harmonic_conjugate(solver, u)

    patch = mesh.nodes_within(p, CHART_RADIUS_H * solver.h)
    pts = mesh.nodes[patch]
    w = gaussian_weights(pts, p, 3.0 * solver.h)
    fit_u = quadratic_fit(pts, u[patch], p, weights=w, radius=3.0 * solver.h)
    fit_v = quadratic_fit(pts, v[patch], p, weights=w, radius=3.0 * solver.h)
    jac = np.stack([fit_u.grad, fit_v.grad])

    g0 = solver.metric(p)
    jinv = np.linalg.inv(jac)
    pulled = jinv.T @ g0 @ jinv
    tol = max(tol_c * solver.h, 1e-10)
    diag_mean = 0.5 * (pulled[0, 0] + pulled[1, 1])
    off = abs(pulled[0, 1])
    aniso = abs(pulled[0, 0] - pulled[1, 1])
    if off > tol * diag_mean or aniso > tol * diag_mean:
        raise NotConformalAtTolerance(
            "pulled-back metric %s not conformal at tolerance %.2e"
            % (np.array2string(pulled, precision=5), tol)
        )
    ginv0 = np.linalg.inv(g0)
    c = 1.0 / float(fit_u.grad @ ginv0 @ fit_u.grad)
    chart = LocalChart(
        center=x0,
        fields=np.stack([u, v], axis=1),
        patch=patch,
        jacobian=jac,
        kind="isothermal",
        conformal_factor=c,
    )
    chart.audit = audit
    chart.pulled_metric = pulled
    return chart


def boundary_homothety_check(mesh: TriMesh, metric1, metric2, gamma_only=True):
    """Tangential metric ratio along the boundary; the scale gauge check.

    For boundary tangents v returns the per-node ratios g1(v,v)/g2(v,v),
    their mean (the homothety estimate) and the max deviation from 1.
    """
    loop = mesh.boundary_loop
    sel = mesh.gamma_mask if gamma_only else np.ones(loop.size, dtype=bool)
    tangents = 0.5 * (mesh.nodes[np.roll(loop, -1)] - mesh.nodes[np.roll(loop, 1)])
    pts = mesh.nodes[loop]
    g1 = metric1(pts)
    g2 = metric2(pts)
    q1 = np.einsum("ka,kab,kb->k", tangents, g1, tangents)
    q2 = np.einsum("ka,kab,kb->k", tangents, g2, tangents)
    if np.any(q2[sel] <= 0) or np.any(np.linalg.norm(tangents[sel], axis=1) < 1e-14):
        raise DegenerateTangent("zero-length boundary tangent")
    ratios = q1[sel] / q2[sel]
    return {
        "ratios": ratios,
        "lambda_mean": float(np.mean(ratios)),
        "max_deviation_from_1": float(np.max(np.abs(ratios - 1.0))),
    }
