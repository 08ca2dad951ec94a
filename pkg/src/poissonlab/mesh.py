"""Triangulated disk meshes, structured grids and FEM assembly.

The disk mesher places nodes on concentric rings and triangulates them with
a Delaunay pass, which is seedless and deterministic for a fixed point set.
Meshes may be adapted to a constant conductivity so the assembled stiffness
matrix is an M-matrix (nonpositive off-diagonals), the property behind the
discrete maximum principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

from .errors import (
    DegenerateArc,
    DegenerateMesh,
    InvertedTriangle,
    NonSpdMetric,
    SingularJacobian,
)
from .geometry import Diffeo, MetricField

TWO_PI = 2.0 * math.pi


@dataclass
class TriMesh:
    """Triangulated disk-type domain with a marked boundary portion.

    nodes           (nv, 2) coordinates
    triangles       (nt, 3) ccw vertex indices
    boundary_loop   ordered indices of the single closed boundary polygon
    gamma_mask      per-boundary-node membership in the data arc
    h               max edge length
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_loop: np.ndarray
    gamma_mask: np.ndarray
    h: float
    nonobtuse: bool = False
    _caches: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_loop = np.ascontiguousarray(self.boundary_loop, dtype=np.int64)
        self.gamma_mask = np.ascontiguousarray(self.gamma_mask, dtype=bool)
        for arr in (self.nodes, self.triangles, self.boundary_loop, self.gamma_mask):
            arr.flags.writeable = False

    @property
    def nv(self):
        return self.nodes.shape[0]

    @property
    def nt(self):
        return self.triangles.shape[0]

    @property
    def nb(self):
        return self.boundary_loop.shape[0]

    @property
    def is_boundary(self):
        if "is_boundary" not in self._caches:
            mask = np.zeros(self.nv, dtype=bool)
            mask[self.boundary_loop] = True
            self._caches["is_boundary"] = mask
        return self._caches["is_boundary"]

    @property
    def interior_idx(self):
        if "interior_idx" not in self._caches:
            self._caches["interior_idx"] = np.nonzero(~self.is_boundary)[0]
        return self._caches["interior_idx"]

    def signed_areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)

    def edges(self):
        """Unique undirected edges as a (ne, 2) sorted-index array."""
        if "edges" not in self._caches:
            t = self.triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e.sort(axis=1)
            self._caches["edges"] = np.unique(e, axis=0)
        return self._caches["edges"]

    def edge_triangles(self):
        """Map sorted edge tuple -> list of adjacent triangle indices."""
        if "edge_tris" not in self._caches:
            adj = {}
            for ti, tri in enumerate(self.triangles):
                for a, b in ((0, 1), (1, 2), (2, 0)):
                    key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                    adj.setdefault(key, []).append(ti)
            self._caches["edge_tris"] = adj
        return self._caches["edge_tris"]

    def node_triangles(self):
        """List of incident triangle indices per node."""
        if "node_tris" not in self._caches:
            lst = [[] for _ in range(self.nv)]
            for ti, tri in enumerate(self.triangles):
                for v in tri:
                    lst[v].append(ti)
            self._caches["node_tris"] = lst
        return self._caches["node_tris"]

    def max_angle(self):
        p = self.nodes[self.triangles]
        worst = 0.0
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            worst = max(worst, float(np.max(np.arccos(np.clip(cosang, -1.0, 1.0)))))
        return worst

    def nodes_within(self, center, radius):
        """Indices of nodes within Euclidean distance radius of center."""
        d = np.linalg.norm(self.nodes - np.asarray(center, dtype=float), axis=1)
        return np.nonzero(d <= radius)[0]


@dataclass(frozen=True)
class PerTriangleMetric:
    """Metric sampled per triangle; used for exact discrete pullbacks."""

    values: np.ndarray  # (nt, 2, 2)


def _ring_counts(n_rings):
    return [max(6 * i, 1) if i > 0 else 1 for i in range(n_rings + 1)]


def _disk_ring_points(radius, n_rings):
    """Concentric-ring point cloud for the disk: ring i has 6i nodes."""
    pts = [np.zeros((1, 2))]
    ring_of = [np.array([0])]
    start = 1
    for i in range(1, n_rings + 1):
        ni = 6 * i
        t = TWO_PI * np.arange(ni) / ni
        r = radius * i / n_rings
        ring = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        pts.append(ring)
        ring_of.append(start + np.arange(ni))
        start += ni
    return np.concatenate(pts), ring_of


def _orient_ccw(nodes, tris):
    p = nodes[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = area2 < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def build_disk_mesh(radius, target_h, gamma_arc=(0.0, TWO_PI), adapt=None) -> TriMesh:
    """Mesh the disk of the given radius with concentric rings.

    gamma_arc is an angle interval (start, end); the data mask marks boundary
    nodes whose angle lies inside it (wrapping allowed).  ``adapt`` is an
    optional constant 2x2 SPD conductivity: the Delaunay pass then runs on
    the transformed point set ``adapt^{-1/2} x`` so the assembled stiffness
    for that conductivity is an M-matrix.
    """
    if not (0 < target_h < radius / 4):
        raise DegenerateMesh(
            "target_h must satisfy 0 < target_h < radius/4, got %g" % target_h
        )
    a0, a1 = float(gamma_arc[0]), float(gamma_arc[1])
    arc_len = a1 - a0
    full = arc_len >= TWO_PI - 1e-12
    if not full and arc_len < 4.0 * target_h / radius:
        raise DegenerateArc("gamma arc of length %g too short" % arc_len)

    n_rings = max(4, math.ceil(radius / target_h))
    pts, rings = _disk_ring_points(radius, n_rings)

    if adapt is not None:
        sig = np.asarray(adapt, dtype=float)
        w, v = np.linalg.eigh(sig)
        if np.min(w) <= 0:
            raise NonSpdMetric("adapt conductivity not SPD")
        inv_sqrt = (v * (w ** -0.5)) @ v.T
        tri_pts = pts @ inv_sqrt.T
    else:
        tri_pts = pts

    tris = _orient_ccw(tri_pts, Delaunay(tri_pts).simplices.astype(np.int64))
    # drop degenerate slivers along the hull, if Qhull ever emits them
    p = tri_pts[tris]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    tris = tris[area2 > 1e-14 * np.max(area2)]

    boundary = rings[-1]
    angles = np.arctan2(pts[boundary, 1], pts[boundary, 0]) % TWO_PI
    if full:
        gamma = np.ones(boundary.size, dtype=bool)
    else:
        rel = (angles - a0) % TWO_PI
        gamma = rel <= (arc_len % TWO_PI if arc_len < TWO_PI else TWO_PI)
        if not np.any(gamma):
            raise DegenerateArc("no boundary node falls inside the gamma arc")

    edge_p = pts[np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])]
    h = float(np.max(np.linalg.norm(edge_p[:, 0] - edge_p[:, 1], axis=1)))

    mesh = TriMesh(
        nodes=pts,
        triangles=tris,
        boundary_loop=boundary,
        gamma_mask=gamma,
        h=h,
        nonobtuse=False,
    )
    mesh.nonobtuse = bool(mesh.max_angle() <= math.pi / 2 + 1e-9)
    return mesh


def pullback_mesh(mesh: TriMesh, diffeo: Diffeo) -> TriMesh:
    """Move the nodes through a boundary-fixing diffeomorphism.

    Connectivity is unchanged; raises InvertedTriangle if the map folds any
    triangle.
    """
    new_nodes = diffeo(mesh.nodes)
    moved = np.max(
        np.linalg.norm(new_nodes[mesh.boundary_loop] - mesh.nodes[mesh.boundary_loop], axis=1)
    )
    if moved > 1e-14:
        raise SingularJacobian(
            "diffeo moves boundary nodes by %g; must be boundary-fixing" % moved
        )
    out = TriMesh(
        nodes=new_nodes,
        triangles=mesh.triangles.copy(),
        boundary_loop=mesh.boundary_loop.copy(),
        gamma_mask=mesh.gamma_mask.copy(),
        h=0.0,
        nonobtuse=False,
    )
    areas = out.signed_areas()
    if np.any(areas <= 0):
        raise InvertedTriangle("%d triangles inverted" % int(np.sum(areas <= 0)))
    p = new_nodes[out.triangles]
    e = np.concatenate([p[:, 0] - p[:, 1], p[:, 1] - p[:, 2], p[:, 2] - p[:, 0]])
    out.h = float(np.max(np.linalg.norm(e, axis=1)))
    out.nonobtuse = bool(out.max_angle() <= math.pi / 2 + 1e-9)
    return out


def pullback_metric_table(mesh_src: TriMesh, metric, mesh_dst: TriMesh) -> PerTriangleMetric:
    """Per-triangle pushforward of a metric along the piecewise-affine node map.

    With ``B`` the affine matrix taking a source triangle to its image, the
    image triangle carries ``B^{-T} G B^{-1}``.  Assembling the destination
    mesh with this table reproduces the source stiffness matrix entry for
    entry, the discrete form of DN-map coordinate invariance.
    """
    src_vals = _metric_at_centroids(mesh_src, metric)
    p1 = mesh_src.nodes[mesh_src.triangles]
    p2 = mesh_dst.nodes[mesh_dst.triangles]
    d1 = np.stack([p1[:, 1] - p1[:, 0], p1[:, 2] - p1[:, 0]], axis=-1)
    d2 = np.stack([p2[:, 1] - p2[:, 0], p2[:, 2] - p2[:, 0]], axis=-1)
    binv = d1 @ np.linalg.inv(d2)  # B^{-1} = D1 D2^{-1}
    vals = np.swapaxes(binv, -1, -2) @ src_vals @ binv
    return PerTriangleMetric(values=vals)


def _metric_at_centroids(mesh: TriMesh, metric):
    if isinstance(metric, PerTriangleMetric):
        return metric.values
    vals = metric(mesh.centroids())
    return vals


def _metric_at_boundary_midpoints(mesh: TriMesh, metric):
    loop = mesh.boundary_loop
    mids = 0.5 * (mesh.nodes[loop] + mesh.nodes[np.roll(loop, -1)])
    if isinstance(metric, PerTriangleMetric):
        owner = np.empty(loop.size, dtype=np.int64)
        adj = mesh.edge_triangles()
        nxt = np.roll(loop, -1)
        for k in range(loop.size):
            key = (min(loop[k], nxt[k]), max(loop[k], nxt[k]))
            owner[k] = adj[key][0]
        return metric.values[owner]
    return metric(mids)


@dataclass(frozen=True)
class Assembly:
    """Stiffness and mass matrices for one (mesh, metric) pair."""

    K: sp.csr_matrix
    M_bdry: sp.csr_matrix      # consistent boundary mass, boundary-loop order
    M_bdry_lumped: np.ndarray  # (nb,)
    M_lumped: np.ndarray       # (nv,) interior lumped mass


def assemble_operator(mesh: TriMesh, metric) -> Assembly:
    """P1 stiffness for the conductivity ``sqrt(det g) g^{-1}`` sampled per
    triangle centroid, plus boundary mass matrices for DN pairings.

    Row sums of K vanish (constants are discrete-harmonic before boundary
    conditions are applied).
    """
    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        raise InvertedTriangle("mesh has %d inverted triangles" % int(np.sum(areas <= 0)))
    g = _metric_at_centroids(mesh, metric)
    det = np.linalg.det(g)
    if np.any(det <= 0) or np.any(np.linalg.eigvalsh(g)[..., 0] <= 0):
        raise NonSpdMetric("metric not SPD on some triangle centroid")
    sigma = np.sqrt(det)[:, None, None] * np.linalg.inv(g)

    p = mesh.nodes[mesh.triangles]
    d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # (nt,2,2) columns
    dinv = np.linalg.inv(d)
    lref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.einsum("ij,tjk->tik", lref, dinv)  # (nt, 3, 2)
    kloc = areas[:, None, None] * np.einsum("tia,tab,tjb->tij", grads, sigma, grads)

    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.triangles, (1, 3)).reshape(-1)
    K = sp.coo_matrix(
        (kloc.reshape(-1), (rows, cols)), shape=(mesh.nv, mesh.nv)
    ).tocsr()

    lumped = np.zeros(mesh.nv)
    np.add.at(lumped, mesh.triangles.reshape(-1), np.repeat(areas / 3.0, 3))

    loop = mesh.boundary_loop
    nb = loop.size
    gb = _metric_at_boundary_midpoints(mesh, metric)
    e = mesh.nodes[np.roll(loop, -1)] - mesh.nodes[loop]
    seg_len = np.sqrt(np.einsum("ka,kab,kb->k", e, gb, e))
    i = np.arange(nb)
    j = (i + 1) % nb
    data = np.concatenate([seg_len / 3.0, seg_len / 3.0, seg_len / 6.0, seg_len / 6.0])
    ri = np.concatenate([i, j, i, j])
    ci = np.concatenate([i, j, j, i])
    M_bdry = sp.coo_matrix((data, (ri, ci)), shape=(nb, nb)).tocsr()
    mb_lumped = np.asarray(M_bdry.sum(axis=1)).ravel()

    return Assembly(K=K, M_bdry=M_bdry, M_bdry_lumped=mb_lumped, M_lumped=lumped)


def is_m_matrix(K: sp.spmatrix, tol=1e-12) -> bool:
    """True if all off-diagonal entries are <= tol (M-matrix sign pattern)."""
    coo = K.tocoo()
    off = coo.data[coo.row != coo.col]
    return bool(np.all(off <= tol))


# ---------------------------------------------------------------------------
# Mesh file format
# ---------------------------------------------------------------------------


def write_mesh(mesh: TriMesh, path):
    """Plain-text format: 'nv nt nb', nv node lines, nt triangle lines, nb loop indices."""
    lines = ["%d %d %d" % (mesh.nv, mesh.nt, mesh.nb)]
    gamma_full = np.zeros(mesh.nv, dtype=int)
    gamma_full[mesh.boundary_loop] = mesh.gamma_mask.astype(int)
    for k in range(mesh.nv):
        lines.append("%r %r %d" % (mesh.nodes[k, 0], mesh.nodes[k, 1], gamma_full[k]))
    for t in mesh.triangles:
        lines.append("%d %d %d" % (t[0], t[1], t[2]))
    for b in mesh.boundary_loop:
        lines.append("%d" % b)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    with open(path) as fh:
        tokens = fh.read().split("\n")
    nv, nt, nb = (int(s) for s in tokens[0].split())
    nodes = np.empty((nv, 2))
    gamma_full = np.empty(nv, dtype=bool)
    for k in range(nv):
        xs, ys, gs = tokens[1 + k].split()
        nodes[k] = (float(xs), float(ys))
        gamma_full[k] = bool(int(gs))
    tris = np.array(
        [[int(s) for s in tokens[1 + nv + k].split()] for k in range(nt)], dtype=np.int64
    )
    loop = np.array([int(tokens[1 + nv + nt + k]) for k in range(nb)], dtype=np.int64)
    p = nodes[tris]
    e = np.concatenate([p[:, 0] - p[:, 1], p[:, 1] - p[:, 2], p[:, 2] - p[:, 0]])
    mesh = TriMesh(
        nodes=nodes,
        triangles=tris,
        boundary_loop=loop,
        gamma_mask=gamma_full[loop],
        h=float(np.max(np.linalg.norm(e, axis=1))),
    )
    mesh.nonobtuse = bool(mesh.max_angle() <= math.pi / 2 + 1e-9)
    return mesh


# ---------------------------------------------------------------------------
# Structured grid for the quasilinear solver
# ---------------------------------------------------------------------------


@dataclass
class Grid:
    """Uniform node grid on the unit square with an interior source window.

    Nodes are indexed (i, j) with x = i*h, y = j*h, flattened row-major.
    The window is a coordinate rectangle kept at least 2h away from the
    boundary.
    """

    n_cells: int
    window: tuple = (0.15, 0.35, 0.15, 0.35)

    def __post_init__(self):
        if self.n_cells < 8:
            raise DegenerateMesh("grid needs at least 8 cells per side")
        x0, x1, y0, y1 = self.window
        margin = 2.0 * self.h
        if min(x0, y0) < margin or max(x1, y1) > 1.0 - margin:
            raise DegenerateMesh("window must keep distance >= 2h from the boundary")

    @property
    def h(self):
        return 1.0 / self.n_cells

    @property
    def n_nodes(self):
        return (self.n_cells + 1) ** 2

    @property
    def shape(self):
        return (self.n_cells + 1, self.n_cells + 1)

    def coords(self):
        t = np.linspace(0.0, 1.0, self.n_cells + 1)
        xg, yg = np.meshgrid(t, t, indexing="ij")
        return np.stack([xg, yg], axis=-1)

    def interior_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    def window_mask(self):
        x0, x1, y0, y1 = self.window
        xy = self.coords()
        return (
            (xy[..., 0] >= x0 - 1e-12)
            & (xy[..., 0] <= x1 + 1e-12)
            & (xy[..., 1] >= y0 - 1e-12)
            & (xy[..., 1] <= y1 + 1e-12)
        )

    def node_index(self, point):
        """Nearest node (i, j) to a coordinate point."""
        i = int(round(point[0] / self.h))
        j = int(round(point[1] / self.h))
        return (min(max(i, 0), self.n_cells), min(max(j, 0), self.n_cells))
