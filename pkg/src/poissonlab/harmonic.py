"""Discrete Dirichlet solves, DN maps and harmonic-measure rows.

The solver factorizes the interior stiffness block once and reuses it for
many right-hand sides.  The DN map is the boundary Schur complement of the
stiffness matrix (weak Neumann data), which keeps it symmetric and makes
the coordinate-invariance identity exact at the discrete level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BoundaryNodeRequested, FactorizationFailed, NonPositiveFactor
from .geometry import MetricField, conformal_metric
from .mesh import Assembly, TriMesh, assemble_operator, is_m_matrix


@dataclass
class HarmonicSolver:
    """Factorized discrete Dirichlet problem on a triangulated disk.

    Boundary vectors are indexed in ``mesh.boundary_loop`` order throughout.
    """

    mesh: TriMesh
    metric: object
    assembly: Assembly
    _lu: object = field(repr=False, default=None)
    _kib: sp.csr_matrix = field(repr=False, default=None)
    _kbb: sp.csr_matrix = field(repr=False, default=None)

    @property
    def interior(self):
        return self.mesh.interior_idx

    @property
    def boundary(self):
        return self.mesh.boundary_loop

    @property
    def h(self):
        return self.mesh.h

    def solve_dirichlet(self, f):
        """Harmonic extension of boundary data ``f`` (boundary-loop order).

        Returns the full nodal field with ``u`` equal to ``f`` on the
        boundary and ``K_II u_I = -K_IB f`` inside.
        """
        f = np.asarray(f, dtype=float)
        u = np.zeros(self.mesh.nv)
        u[self.boundary] = f
        rhs = -self._kib @ f
        u[self.interior] = self._lu.solve(rhs)
        return u

    def solve_many(self, F):
        """Batch harmonic extension: ``F`` is (nb, K), returns (nv, K)."""
        F = np.asarray(F, dtype=float)
        U = np.zeros((self.mesh.nv, F.shape[1]))
        U[self.boundary] = F
        U[self.interior] = self._lu.solve(-(self._kib @ F))
        return U

    def solve_interior_sources(self, loads):
        """Zero-Dirichlet solves for nodal load columns ``loads`` (nv, K).

        Rows on the boundary are exactly zero in the result.
        """
        loads = np.asarray(loads, dtype=float)
        U = np.zeros((self.mesh.nv, loads.shape[1]))
        U[self.interior] = self._lu.solve(loads[self.interior])
        return U

    def harmonic_measure_row(self, node) -> "HarmonicMeasureRow":
        """Row of the discrete Poisson operator at an interior node.

        The weights form the harmonic measure of the node over boundary
        nodes: they sum to one exactly up to solver tolerance, and applying
        them to boundary data reproduces ``solve_dirichlet`` at the node.
        """
        node = int(node)
        if self.mesh.is_boundary[node]:
            raise BoundaryNodeRequested("node %d lies on the boundary" % node)
        pos = int(np.searchsorted(self.interior, node))
        e = np.zeros(self.interior.size)
        e[pos] = 1.0
        y = self._lu.solve(e, trans="T")
        weights = -(self._kib.T @ y)
        return HarmonicMeasureRow(node=node, weights=weights)

    def dn_map(self) -> "DnMap":
        """Weak DN map as the boundary Schur complement of the stiffness."""
        kib_dense = self._kib.toarray()
        x = self._lu.solve(kib_dense)
        lam = self._kbb.toarray() - kib_dense.T @ x
        return DnMap(
            lam=lam,
            M_bdry=self.assembly.M_bdry,
            M_bdry_lumped=self.assembly.M_bdry_lumped,
        )

    def laplacian_estimate(self, u, nodes):
        """Lumped-mass-normalized stiffness residual: a pointwise Laplacian proxy.

        Vanishes like O(h^2) on interpolants of smooth harmonics and stays
        O(1) on genuinely non-harmonic fields.
        """
        r = self.assembly.K @ np.asarray(u, dtype=float)
        nodes = np.asarray(nodes)
        nodes = nodes[~self.mesh.is_boundary[nodes]]
        if nodes.size == 0:
            return 0.0
        return float(np.max(np.abs(r[nodes] / self.assembly.M_lumped[nodes])))


@dataclass(frozen=True)
class DnMap:
    """Dense weak-form DN matrix with the boundary mass for pairings."""

    lam: np.ndarray
    M_bdry: sp.csr_matrix
    M_bdry_lumped: np.ndarray

    def apply(self, f):
        return self.lam @ np.asarray(f, dtype=float)

    def strong(self, f):
        """Pointwise Neumann values: lumped-mass inverse applied to weak data."""
        return self.apply(f) / self.M_bdry_lumped

    def rayleigh(self, f):
        """DN eigenvalue estimate <f, Lam f> / <f, M f> for a trial vector."""
        f = np.asarray(f, dtype=float)
        return float(f @ self.apply(f)) / float(f @ (self.M_bdry @ f))

    def symmetry_defect(self):
        return float(
            np.max(np.abs(self.lam - self.lam.T)) / max(1.0, np.max(np.abs(self.lam)))
        )


@dataclass(frozen=True)
class HarmonicMeasureRow:
    node: int
    weights: np.ndarray

    def apply(self, f):
        return float(self.weights @ np.asarray(f, dtype=float))

    @property
    def total(self):
        return float(np.sum(self.weights))

    @property
    def min_weight(self):
        return float(np.min(self.weights))


def build_solver(mesh: TriMesh, metric) -> HarmonicSolver:
    """Assemble and factorize; raises FactorizationFailed if K_II is singular."""
    asm = assemble_operator(mesh, metric)
    interior = mesh.interior_idx
    boundary = mesh.boundary_loop
    kcsr = asm.K
    kii = kcsr[interior][:, interior].tocsc()
    kib = kcsr[interior][:, boundary].tocsr()
    kbb = kcsr[boundary][:, boundary].tocsr()
    try:
        lu = spla.splu(kii)
    except RuntimeError as exc:
        raise FactorizationFailed(str(exc)) from exc
    if not np.all(np.isfinite(lu.solve(np.ones(interior.size)))):
        raise FactorizationFailed("singular interior block")
    return HarmonicSolver(mesh=mesh, metric=metric, assembly=asm, _lu=lu, _kib=kib, _kbb=kbb)


def conformal_invariance_check_2d(mesh: TriMesh, metric: MetricField, factor) -> float:
    """Max-norm DN difference between ``g`` and ``c g`` in two dimensions.

    The 2D conductivity ``sqrt(det g) g^{-1}`` is unchanged by ``g -> c g``,
    so the discrepancy is zero up to factoring roundoff regardless of the
    boundary values of ``c``; callers should still use ``c = 1`` on the
    boundary to stay within the boundary-fixing gauge.
    """
    value = factor.value
    cb = np.asarray(value(mesh.nodes[mesh.boundary_loop]))
    if np.any(np.asarray(value(mesh.centroids())) <= 0):
        raise NonPositiveFactor("conformal factor must be positive")
    scaled = conformal_metric(2, value, factor.grad, base=metric, name="scaled")
    dn_a = build_solver(mesh, metric).dn_map()
    dn_b = build_solver(mesh, scaled).dn_map()
    defect = float(np.max(np.abs(dn_a.lam - dn_b.lam)))
    if np.max(np.abs(cb - 1.0)) > 1e-12:
        import warnings

        warnings.warn(
            "conformal factor is not 1 on the boundary; DN still agrees in 2D",
            stacklevel=2,
        )
    return defect


def measure_positivity_report(solver: HarmonicSolver, nodes=None):
    """Min weight and worst row-sum defect over the requested interior nodes."""
    if nodes is None:
        nodes = solver.interior
    min_w = np.inf
    sum_err = 0.0
    for node in np.asarray(nodes):
        row = solver.harmonic_measure_row(int(node))
        min_w = min(min_w, row.min_weight)
        sum_err = max(sum_err, abs(row.total - 1.0))
    return {"min_weight": float(min_w), "max_sum_defect": float(sum_err),
            "m_matrix": is_m_matrix(solver.assembly.K)}
