"""Embedding clouds, point correspondence by matching, and morphism checks.

Each interior point is represented by the vector of solution values
``(u_{f_1}(x), ..., u_{f_K}(x))``.  Two manifolds carrying the same data
family are compared by nearest-row matching refined to sub-node accuracy
with barycentric interpolation; the induced map is the reconstruction
candidate, whose Jacobian solves the gradient-matching equations pointwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguousMatch, RankDeficientGradients
from .harmonic import HarmonicSolver
from .mesh import TriMesh
from .runge import SourceBasis

HOLDOUT_MOD = 4  # column k is held out iff k % 4 == 3 (75/25 split)


def holdout_split(K):
    cols = np.arange(K)
    hold = cols[cols % HOLDOUT_MOD == HOLDOUT_MOD - 1]
    train = cols[cols % HOLDOUT_MOD != HOLDOUT_MOD - 1]
    return train, hold


@dataclass
class EmbeddingCloud:
    """Per-node solution-value vectors for one manifold.

    E[x, k] = value at node x of the solution driven by basis column k.
    For boundary-data clouds the boundary rows equal the basis traces; for
    interior-source clouds they are exactly zero.
    """

    tag: str
    mesh: TriMesh
    E: np.ndarray
    basis: SourceBasis
    kind: str = "boundary-P"
    _grad_cache: dict = field(default_factory=dict, repr=False)

    @property
    def K(self):
        return self.E.shape[1]

    def scaled(self, cols=None):
        cols = np.arange(self.K) if cols is None else np.asarray(cols)
        return self.E[:, cols] * self.basis.col_scale[cols][None, :]

    def min_row_separation(self, nodes=None):
        nodes = self.mesh.interior_idx if nodes is None else np.asarray(nodes)
        rows = self.scaled()[nodes]
        best = np.inf
        for i in range(0, rows.shape[0], 256):
            block = rows[i : i + 256]
            d2 = (
                np.sum(block**2, axis=1)[:, None]
                + np.sum(rows**2, axis=1)[None, :]
                - 2.0 * block @ rows.T
            )
            for r in range(block.shape[0]):
                d2[r, i + r] = np.inf
            best = min(best, float(np.sqrt(max(np.min(d2), 0.0))))
        return best

    def triangle_gradients(self, cols=None):
        """(nt, K, 2) P1 gradients of the selected fields per triangle."""
        key = ("tri", None if cols is None else tuple(np.asarray(cols)))
        if key not in self._grad_cache:
            mesh = self.mesh
            p = mesh.nodes[mesh.triangles]
            d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
            dinv = np.linalg.inv(d)
            lref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            grads = np.einsum("ij,tjk->tik", lref, dinv)  # (nt, 3, 2)
            e = self.E if cols is None else self.E[:, np.asarray(cols)]
            vals = e[mesh.triangles]  # (nt, 3, K)
            self._grad_cache[key] = np.einsum("tik,tia->tka", vals, grads)
        return self._grad_cache[key]

    def node_gradients(self, cols=None):
        """(nv, K, 2) area-weighted average of incident triangle gradients."""
        key = ("node", None if cols is None else tuple(np.asarray(cols)))
        if key not in self._grad_cache:
            mesh = self.mesh
            tg = self.triangle_gradients(cols)
            areas = mesh.signed_areas()
            acc = np.zeros((mesh.nv,) + tg.shape[1:])
            wsum = np.zeros(mesh.nv)
            for v in range(3):
                np.add.at(acc, mesh.triangles[:, v], tg * areas[:, None, None])
                np.add.at(wsum, mesh.triangles[:, v], areas)
            self._grad_cache[key] = acc / wsum[:, None, None]
        return self._grad_cache[key]


def build_embedding(solver: HarmonicSolver, basis: SourceBasis, tag="M") -> EmbeddingCloud:
    """Solve for every basis column and collect the value matrix."""
    if basis.kind == "window":
        E = solver.solve_interior_sources(basis.F)
        kind = "interior-R"
    else:
        E = solver.solve_many(basis.F)
        kind = "boundary-P"
    return EmbeddingCloud(tag=tag, mesh=solver.mesh, E=E, basis=basis, kind=kind)


@dataclass
class CorrespondenceMap:
    """Per-node match of cloud 1 into cloud 2."""

    nodes: np.ndarray          # node indices of mesh 1 that were matched
    triangle: np.ndarray       # winning triangle in mesh 2
    bary: np.ndarray           # (n, 3) barycentric coordinates
    position: np.ndarray       # (n, 2) matched positions in mesh 2
    residual: np.ndarray       # row-matching residual
    jacobian: np.ndarray = None   # (n, 2, 2), filled by estimate_jacobian
    jac_residual: np.ndarray = None

    def det_jacobian(self):
        return np.linalg.det(self.jacobian)


def _simplex_lstsq(rows, target):
    """Barycentric least squares on one triangle, clipped to the simplex.

    rows: (3, K) embedding rows at the triangle vertices; target: (K,).
    Returns (bary, residual).
    """
    # unconstrained solve in (l2, l3) with l1 = 1 - l2 - l3
    a = np.stack([rows[1] - rows[0], rows[2] - rows[0]], axis=1)  # (K, 2)
    b = target - rows[0]
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    lam = np.array([1.0 - sol[0] - sol[1], sol[0], sol[1]])
    if np.all(lam >= -1e-12):
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum()
        return lam, float(np.linalg.norm(rows.T @ lam - target))
    # project onto the three edges and corners, keep the best
    best = None
    for i, j in ((0, 1), (1, 2), (0, 2)):
        d = rows[j] - rows[i]
        denom = float(d @ d)
        t = 0.0 if denom == 0 else float(np.clip((target - rows[i]) @ d / denom, 0.0, 1.0))
        lam_e = np.zeros(3)
        lam_e[i] = 1.0 - t
        lam_e[j] = t
        r = float(np.linalg.norm(rows.T @ lam_e - target))
        if best is None or r < best[1]:
            best = (lam_e, r)
    return best


def match_embeddings(c1: EmbeddingCloud, c2: EmbeddingCloud, cols=None) -> CorrespondenceMap:
    """Nearest-row matching of cloud 1 into cloud 2, refined per triangle.

    Matches interior nodes of mesh 1 (plus data-arc boundary nodes for
    boundary-data clouds).  Both clouds must be indexed by the same basis.
    """
    if c1.K != c2.K:
        raise ValueError("clouds use different basis sizes")
    r1 = c1.scaled(cols)
    r2 = c2.scaled(cols)
    if c1.kind == "interior-R":
        nodes = c1.mesh.interior_idx
    else:
        gamma_nodes = c1.mesh.boundary_loop[c1.mesh.gamma_mask]
        nodes = np.concatenate([c1.mesh.interior_idx, gamma_nodes])
        nodes = np.sort(nodes)
    node_tris = c2.mesh.node_triangles()
    tris2 = c2.mesh.triangles
    nn = np.empty(nodes.size, dtype=np.int64)
    n2sq = np.sum(r2**2, axis=1)
    for i in range(0, nodes.size, 256):
        block = r1[nodes[i : i + 256]]
        d2 = n2sq[None, :] - 2.0 * block @ r2.T
        nn[i : i + 256] = np.argmin(d2, axis=1)

    tri_out = np.empty(nodes.size, dtype=np.int64)
    bary_out = np.empty((nodes.size, 3))
    pos_out = np.empty((nodes.size, 2))
    res_out = np.empty(nodes.size)
    for i, x in enumerate(nodes):
        target = r1[x]
        cands = node_tris[nn[i]]
        best = None
        second = None
        for ti in cands:
            rows = r2[tris2[ti]]
            lam, res = _simplex_lstsq(rows, target)
            entry = (res, ti, lam)
            if best is None or res < best[0]:
                second = best
                best = entry
            elif second is None or res < second[0]:
                second = entry
        res_b, ti_b, lam_b = best
        pos_b = lam_b @ c2.mesh.nodes[tris2[ti_b]]
        if second is not None and abs(second[0] - res_b) < 1e-12:
            pos_s = second[2] @ c2.mesh.nodes[tris2[second[1]]]
            if np.linalg.norm(pos_s - pos_b) > c2.mesh.h:
                warnings.warn(
                    "ambiguous match at node %d: residuals tie, positions differ"
                    % int(x),
                    AmbiguousMatch,
                    stacklevel=2,
                )
        tri_out[i] = ti_b
        bary_out[i] = lam_b
        pos_out[i] = pos_b
        res_out[i] = res_b
    return CorrespondenceMap(
        nodes=nodes, triangle=tri_out, bary=bary_out, position=pos_out, residual=res_out
    )


def estimate_jacobian(
    c1: EmbeddingCloud, c2: EmbeddingCloud, cmap: CorrespondenceMap, cols=None
) -> CorrespondenceMap:
    """Solve the gradient-matching equations for the 2x2 Jacobian per node.

    For each matched pair the rows ``du1_k(x)`` must equal
    ``du2_k(J(x)) DJ(x)``; with at least three independent gradients this
    determines DJ by least squares.
    """
    g1 = c1.node_gradients(cols)
    g2_node = c2.node_gradients(cols)
    g2_tri = c2.triangle_gradients(cols)
    tris2 = c2.mesh.triangles
    n = cmap.nodes.size
    jac = np.empty((n, 2, 2))
    jres = np.empty(n)
    for i in range(n):
        d1 = g1[cmap.nodes[i]]
        corner = int(np.argmax(cmap.bary[i]))
        if cmap.bary[i, corner] > 1.0 - 1e-9:
            d2 = g2_node[tris2[cmap.triangle[i], corner]]
        else:
            d2 = g2_tri[cmap.triangle[i]]
        s = np.linalg.svd(d2, compute_uv=False)
        if s[-1] <= 1e-10 * s[0]:
            raise RankDeficientGradients(
                "gradients at matched point of node %d are rank deficient"
                % int(cmap.nodes[i])
            )
        dj, res, *_ = np.linalg.lstsq(d2, d1, rcond=None)
        jac[i] = dj
        jres[i] = float(np.sqrt(np.sum((d2 @ dj - d1) ** 2)))
    cmap.jacobian = jac
    cmap.jac_residual = jres
    return cmap


def verify_harmonic_morphism(
    c1: EmbeddingCloud, c2: EmbeddingCloud, cmap: CorrespondenceMap, holdout_cols
) -> float:
    """Max holdout discrepancy |u1_f(x) - u2_f(J(x))| over matched nodes."""
    holdout_cols = np.asarray(holdout_cols)
    vals1 = c1.E[:, holdout_cols][cmap.nodes]  # (n, Kh)
    tri_rows = c2.E[:, holdout_cols][c2.mesh.triangles[cmap.triangle]]  # (n, 3, Kh)
    vals2 = np.einsum("nj,njk->nk", cmap.bary, tri_rows)
    return float(np.max(np.abs(vals1 - vals2)))


def interior_match_errors(cmap: CorrespondenceMap, mesh1: TriMesh, diffeo=None):
    """Distances between matched positions and the true images of the nodes."""
    truth = mesh1.nodes[cmap.nodes] if diffeo is None else diffeo(mesh1.nodes[cmap.nodes])
    return np.linalg.norm(cmap.position - truth, axis=1)
