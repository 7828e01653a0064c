"""Piecewise-linear finite elements on triangulations of the unit disk."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay

__all__ = ["TriMesh", "MeshError", "generate_disk_mesh", "load_mesh", "save_mesh",
           "locate", "interp", "mass_matrix", "disk_quadrature", "load_vector", "project_l2"]

BARY_TOL = 1e-12
DISK_TOL = 1e-12
BOUNDARY_TOL = 1e-10
MIN_AREA = 1e-14
_QUERY_CHUNK = 100_000
CELL_FACTOR = 0.5


class MeshError(ValueError):
    """Invalid or non-conforming triangulation."""


def _signed_areas(nodes, tris):
    p0, p1, p2 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation with P1 nodal basis functions.

    Triangles are stored counter-clockwise.  Construction validates the disk,
    orientation and conformity invariants and raises :class:`MeshError`.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray = field(default=None)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (m, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError("triangles must have shape (K, 3)")
        m = nodes.shape[0]
        if tris.size and (tris.min() < 0 or tris.max() >= m):
            raise MeshError("triangle index out of range")
        radius = np.hypot(nodes[:, 0], nodes[:, 1])
        if np.any(radius > 1 + DISK_TOL):
            raise MeshError(f"node outside the unit disk (max radius {radius.max():.6g})")
        bflags = (np.abs(radius - 1) <= BOUNDARY_TOL) if self.boundary is None \
            else np.asarray(self.boundary, dtype=bool)
        if bflags.shape != (m,):
            raise MeshError("boundary flags must have one entry per node")
        if np.any(np.abs(radius[bflags] - 1) > BOUNDARY_TOL):
            raise MeshError("boundary-flagged node off the unit circle")
        area = _signed_areas(nodes, tris)
        flip = area < 0
        if flip.any():
            tris = tris.copy()
            tris[flip, 1], tris[flip, 2] = tris[flip, 2].copy(), tris[flip, 1].copy()
            area = np.abs(area)
        if np.any(area <= MIN_AREA):
            raise MeshError("degenerate triangle")
        _check_conforming(nodes, tris, area)
        for arr in (nodes, tris, bflags):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary", bflags)
        object.__setattr__(self, "_areas", area)

    @property
    def m(self) -> int:
        return self.nodes.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return self._areas

    @property
    def area(self) -> float:
        return float(self._areas.sum())

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha256(self.nodes.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:12]

    @cached_property
    def _locator(self) -> "_BucketLocator":
        return _BucketLocator(self)

    @cached_property
    def _boundary_edges(self):
        return _boundary_edges_by_angle(self.nodes, self.triangles)

    @cached_property
    def median_edge(self) -> float:
        t = self.triangles
        e = np.concatenate([self.nodes[t[:, 1]] - self.nodes[t[:, 0]],
                            self.nodes[t[:, 2]] - self.nodes[t[:, 1]],
                            self.nodes[t[:, 0]] - self.nodes[t[:, 2]]])
        return float(np.median(np.hypot(e[:, 0], e[:, 1])))

    def locate_many(self, points):
        """Containing triangle (``-1`` if outside) and barycentric coords per point."""
        return self._locator.query(np.asarray(points, dtype=float).reshape(-1, 2))

    def basis_weights(self, points, extend: bool = False):
        """Node indices and P1 basis values at each point, shape ``(P, 3)`` each.

        Outside the mesh polygon the values are zero unless ``extend`` is set, in
        which case points of the thin layer between the polygon and the unit
        circle take the value at their radial projection onto the boundary edge.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        tri, bary = self.locate_many(pts)
        nodes = np.zeros((pts.shape[0], 3), dtype=np.int64)
        found = tri >= 0
        nodes[found] = self.triangles[tri[found]]
        weights = np.where(found[:, None], bary, 0.0)
        if extend:
            miss = ~found & (np.hypot(pts[:, 0], pts[:, 1]) <= 1 + 1e-9)
            if miss.any():
                a, b, lam = _radial_projection(self._boundary_edges, pts[miss])
                nodes[miss, 0] = a
                nodes[miss, 1] = b
                nodes[miss, 2] = a
                weights[miss, 0] = 1 - lam
                weights[miss, 1] = lam
                weights[miss, 2] = 0.0
        return nodes, weights

    def evaluate(self, coeffs, points, extend: bool = False) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.m,):
            raise ValueError(f"expected {self.m} coefficients, got shape {coeffs.shape}")
        nodes, w = self.basis_weights(points, extend=extend)
        return np.einsum("pk,pk->p", coeffs[nodes], w)

    def nodal(self, func) -> np.ndarray:
        """Nodal values of a vectorised function ``func(x)`` with ``x`` of shape (m, 2)."""
        return np.asarray(func(self.nodes), dtype=float)


def _check_conforming(nodes, tris, area):
    key = np.sort(tris, axis=1)
    if np.unique(key, axis=0).shape[0] != key.shape[0]:
        raise MeshError("repeated triangle")
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    if np.unique(directed, axis=0).shape[0] != directed.shape[0]:
        raise MeshError("inconsistently oriented or overlapping triangles")
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected, axis=0, return_counts=True)
    if counts.max(initial=0) > 2:
        raise MeshError("edge shared by more than two triangles")
    # overlaps or hanging nodes show up as a mismatch against the boundary polygon
    bd = _boundary_directed(tris)
    if bd.size and (np.bincount(bd[:, 0]).max() > 1 or np.bincount(bd[:, 1]).max() > 1):
        raise MeshError("boundary is not a simple polygon (hanging node or pinch point)")
    p, q = nodes[bd[:, 0]], nodes[bd[:, 1]]
    enclosed = 0.5 * np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0])
    if abs(enclosed - area.sum()) > 1e-9 * max(1.0, area.sum()):
        raise MeshError("triangles overlap or leave gaps (non-conforming)")


def _boundary_directed(tris):
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inv.ravel()] == 1]


def _boundary_edges_by_angle(nodes, tris):
    bd = _boundary_directed(tris)
    theta = np.arctan2(nodes[bd[:, 0], 1], nodes[bd[:, 0], 0]) % (2 * np.pi)
    order = np.argsort(theta)
    bd = bd[order]
    return bd, theta[order], nodes[bd[:, 0]], nodes[bd[:, 1]]


def _radial_projection(edges, pts):
    """Boundary edge hit by the ray from the origin through each point, and the
    linear parameter of the hit point along that edge."""
    bd, theta0, pa, pb = edges
    phi = np.arctan2(pts[:, 1], pts[:, 0]) % (2 * np.pi)
    k = np.searchsorted(theta0, phi, side="right") - 1  # -1 wraps to the last edge
    u = np.column_stack([np.cos(phi), np.sin(phi)])
    a, e = pa[k], pb[k] - pa[k]
    num = a[:, 0] * u[:, 1] - a[:, 1] * u[:, 0]
    den = u[:, 0] * e[:, 1] - u[:, 1] * e[:, 0]
    lam = np.clip(num / den, 0.0, 1.0)
    return bd[k, 0], bd[k, 1], lam


class _BucketLocator:
    """Uniform background grid; each cell lists the triangles whose bounding boxes
    overlap it, in increasing index order so that ties resolve to the lowest index."""

    def __init__(self, mesh: TriMesh):
        nodes, tris = mesh.nodes, mesh.triangles
        p0 = nodes[tris[:, 0]]
        e1 = nodes[tris[:, 1]] - p0
        e2 = nodes[tris[:, 2]] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # inverse edge matrix maps (x - p0) to barycentric coordinates (l1, l2)
        self.p0x, self.p0y = p0[:, 0].copy(), p0[:, 1].copy()
        self.a11, self.a12 = e2[:, 1] / det, -e2[:, 0] / det
        self.a21, self.a22 = -e1[:, 1] / det, e1[:, 0] / det
        self.lo = np.array([-1.0 - 1e-9, -1.0 - 1e-9])
        cell = CELL_FACTOR * mesh.median_edge
        self.nc = max(1, int(np.ceil((2.0 + 2e-9) / cell)))
        self.cell = (2.0 + 2e-9) / self.nc
        tri_xy = nodes[tris]
        bmin = np.floor((tri_xy.min(axis=1) - self.lo) / self.cell).astype(np.int64)
        bmax = np.floor((tri_xy.max(axis=1) - self.lo) / self.cell).astype(np.int64)
        bmin = np.clip(bmin, 0, self.nc - 1)
        bmax = np.clip(bmax, 0, self.nc - 1)
        span = bmax - bmin + 1
        counts = span[:, 0] * span[:, 1]
        tri_id = np.repeat(np.arange(len(tris)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sx = np.repeat(span[:, 0], counts)
        cx = np.repeat(bmin[:, 0], counts) + offs % sx
        cy = np.repeat(bmin[:, 1], counts) + offs // sx
        cell_id = cx * self.nc + cy
        order = np.lexsort((tri_id, cell_id))
        cell_id, tri_id = cell_id[order], tri_id[order]
        per_cell = np.bincount(cell_id, minlength=self.nc * self.nc)
        kmax = int(per_cell.max())
        start = np.cumsum(per_cell) - per_cell
        slot = np.arange(len(cell_id)) - start[cell_id]
        self.cand = np.full((self.nc * self.nc, kmax), -1, dtype=np.int64)
        self.cand[cell_id, slot] = tri_id

    def query(self, pts: np.ndarray):
        P = pts.shape[0]
        tri = np.full(P, -1, dtype=np.int64)
        bary = np.zeros((P, 3))
        for s in range(0, P, _QUERY_CHUNK):
            sl = slice(s, min(P, s + _QUERY_CHUNK))
            tri[sl], bary[sl] = self._query_chunk(pts[sl])
        return tri, bary

    def _query_chunk(self, pts):
        ij = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        inside_box = np.all((ij >= 0) & (ij < self.nc), axis=1)
        ij = np.clip(ij, 0, self.nc - 1)
        cand = self.cand[ij[:, 0] * self.nc + ij[:, 1]]
        cand[~inside_box] = -1
        valid = cand >= 0
        c = np.where(valid, cand, 0)
        dx = pts[:, 0:1] - self.p0x[c]
        dy = pts[:, 1:2] - self.p0y[c]
        l1 = self.a11[c] * dx + self.a12[c] * dy
        l2 = self.a21[c] * dx + self.a22[c] * dy
        l0 = 1.0 - l1 - l2
        ok = valid & (l0 >= -BARY_TOL) & (l1 >= -BARY_TOL) & (l2 >= -BARY_TOL)
        first = np.argmax(ok, axis=1)
        rows = np.arange(len(pts))
        found = ok[rows, first]
        tri = np.where(found, c[rows, first], -1)
        bary = np.stack([l0[rows, first], l1[rows, first], l2[rows, first]], axis=1)
        bary[~found] = 0.0
        return tri, bary


def generate_disk_mesh(target_nodes: int) -> TriMesh:
    """Deterministic concentric-ring mesh of the unit disk.

    Ring ``k`` of ``K`` sits at radius ``k/K`` and holds about ``2 pi k s`` nodes,
    with ``s`` tuned so the total lands next to ``target_nodes``; the points are
    Delaunay-triangulated and the outer ring is flagged as boundary.
    """
    if target_nodes < 16:
        raise ValueError("target_nodes must be at least 16")
    K = max(2, int(round(np.sqrt(target_nodes / np.pi))))

    def counts(s):
        return np.maximum(3, np.round(s * 2 * np.pi * np.arange(1, K + 1)).astype(int))

    lo, hi = 0.2, 5.0
    for _ in range(60):
        s = 0.5 * (lo + hi)
        if 1 + counts(s).sum() < target_nodes:
            lo = s
        else:
            hi = s
    best = min((lo, hi), key=lambda s: abs(1 + counts(s).sum() - target_nodes))
    ring_counts = counts(best)
    pts = [np.zeros((1, 2))]
    for k, nk in enumerate(ring_counts, start=1):
        theta = (np.arange(nk) + 0.5 * (k % 2)) * (2 * np.pi / nk)
        pts.append(np.column_stack([np.cos(theta), np.sin(theta)]) * (k / K))
    nodes = np.vstack(pts)
    nodes[-ring_counts[-1]:] /= np.hypot(nodes[-ring_counts[-1]:, 0],
                                        nodes[-ring_counts[-1]:, 1])[:, None]
    tris = Delaunay(nodes).simplices.astype(np.int64)
    boundary = np.zeros(len(nodes), dtype=bool)
    boundary[-ring_counts[-1]:] = True
    return TriMesh(nodes, tris, boundary)


def save_mesh(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{mesh.m} {len(mesh.triangles)}\n")
        for (x1, x2), b in zip(mesh.nodes, mesh.boundary):
            fh.write(f"{x1:.17g} {x2:.17g} {int(b)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path) -> TriMesh:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        m, K = (int(v) for v in lines[0])
        if len(lines) != 1 + m + K:
            raise MeshError(f"expected {m} node and {K} triangle lines")
        node_rows = lines[1:1 + m]
        tri_rows = lines[1 + m:]
        if any(len(r) != 3 for r in node_rows + tri_rows):
            raise MeshError("each node/triangle line needs three fields")
        nodes = np.array([[float(r[0]), float(r[1])] for r in node_rows])
        flags = np.array([int(r[2]) for r in node_rows])
        tris = np.array([[int(v) for v in r] for r in tri_rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if not np.all(np.isin(flags, (0, 1))):
        raise MeshError("boundary flags must be 0 or 1")
    return TriMesh(nodes, tris.reshape(-1, 3), flags.astype(bool))


def locate(mesh: TriMesh, x):
    """``(triangle index, barycentric coords)`` for a point, or ``None`` if outside."""
    tri, bary = mesh.locate_many(np.asarray(x, dtype=float).reshape(1, 2))
    if tri[0] < 0:
        return None
    return int(tri[0]), bary[0]


def interp(mesh: TriMesh, coeffs, x, extend: bool = False):
    """P1 interpolant at ``x`` (one point or an array of points); zero outside."""
    x = np.asarray(x, dtype=float)
    vals = mesh.evaluate(coeffs, x.reshape(-1, 2), extend=extend)
    return float(vals[0]) if x.ndim == 1 else vals.reshape(x.shape[:-1])


def mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """Exact P1 mass matrix: local blocks ``S/12 * (1 + delta_ij)``."""
    tris = mesh.triangles
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    vals = mesh.areas[:, None, None] * local[None]
    rows = np.repeat(tris[:, :, None], 3, axis=2)
    cols = np.repeat(tris[:, None, :], 3, axis=1)
    M = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(mesh.m, mesh.m))
    return M.tocsr()


def disk_quadrature(n_r: int = 200, n_theta: int = 512):
    """Points ``(P, 2)`` and weights for ``int_{|x|<1} dx``: Gauss-Legendre in r, trapezoid in angle."""
    u, wu = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (u + 1.0)
    wr = 0.5 * wu * r * (2 * np.pi / n_theta)
    th = np.arange(n_theta) * (2 * np.pi / n_theta)
    R, T = np.meshgrid(r, th, indexing="ij")
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    return pts, np.repeat(wr, n_theta)


def load_vector(mesh: TriMesh, func, n_r: int = 200, n_theta: int = 512) -> np.ndarray:
    """``b_j = int_disk func * phi_j`` with the radially extended basis."""
    pts, w = disk_quadrature(n_r, n_theta)
    nodes, bw = mesh.basis_weights(pts, extend=True)
    vals = bw * (w * np.asarray(func(pts), dtype=float))[:, None]
    return np.bincount(nodes.ravel(), weights=vals.ravel(), minlength=mesh.m)


def project_l2(mesh: TriMesh, func, mass=None) -> np.ndarray:
    """Nodal values of the L2 projection ``m^{-1} b`` of ``func``."""
    mass = mass_matrix(mesh) if mass is None else mass
    return spla.spsolve(sp.csc_matrix(mass), load_vector(mesh, func))
