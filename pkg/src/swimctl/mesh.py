"""Disk-in-disk reference geometry, P2/P1 Lagrange spaces and integral primitives.

The outer disk ``O`` of radius ``outer_radius`` contains the solid disk ``S``
of radius ``solid_radius`` centred at the origin.  The fluid annulus is
``F = O minus S``.  The triangulation is built from concentric polygonal rings
so that every ring radius, including the solid boundary, is resolved exactly
at the vertices.

Normals on a tagged boundary curve always point away from the origin, i.e.
outward from the region the curve encloses (``S`` for the solid boundary,
``O`` for the outer boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidGeometry, MeshFileError, TagError

FLUID = "FLUID"
SOLID = "SOLID"
SOLID_BOUNDARY = "SOLID_BOUNDARY"
OUTER_BOUNDARY = "OUTER_BOUNDARY"
REGIONS = (FLUID, SOLID)
BOUNDARIES = (SOLID_BOUNDARY, OUTER_BOUNDARY)

# Degree-4 rule on the reference triangle (Dunavant, 6 points). Weights sum to 1.
_A, _B = 0.445948490915965, 0.091576213509771
_WA, _WB = 0.223381589678011, 0.109951743655322
TRI_POINTS = np.array(
    [[_A, _A], [1 - 2 * _A, _A], [_A, 1 - 2 * _A], [_B, _B], [1 - 2 * _B, _B], [_B, 1 - 2 * _B]]
)
TRI_WEIGHTS = np.array([_WA] * 3 + [_WB] * 3)

# Degree-5 Gauss rule on [0, 1].
_G = math.sqrt(3.0 / 5.0) / 2.0
EDGE_POINTS = np.array([0.5 - _G, 0.5, 0.5 + _G])
EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0

# Local P2 numbering: vertices 0,1,2 then edge nodes on (0,1), (1,2), (2,0).
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def p2_shape(ref: np.ndarray):
    """Values (npt, 6) and barycentric derivatives (npt, 6, 3) of the P2 basis."""
    ref = np.atleast_2d(ref)
    lam = np.stack([1.0 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]], axis=1)
    n = lam.shape[0]
    val = np.empty((n, 6))
    dval = np.zeros((n, 6, 3))
    for v in range(3):
        val[:, v] = lam[:, v] * (2 * lam[:, v] - 1)
        dval[:, v, v] = 4 * lam[:, v] - 1
    for k, (a, b) in enumerate(LOCAL_EDGES):
        val[:, 3 + k] = 4 * lam[:, a] * lam[:, b]
        dval[:, 3 + k, a] = 4 * lam[:, b]
        dval[:, 3 + k, b] = 4 * lam[:, a]
    return val, dval


def p2_second_barycentric() -> np.ndarray:
    """Constant second barycentric derivatives (6, 3, 3) of the P2 basis."""
    h = np.zeros((6, 3, 3))
    for v in range(3):
        h[v, v, v] = 4.0
    for k, (a, b) in enumerate(LOCAL_EDGES):
        h[3 + k, a, b] = 4.0
        h[3 + k, b, a] = 4.0
    return h


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of ``O`` with region and boundary tags."""

    vertices: np.ndarray
    cells: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    region_tags: np.ndarray
    solid_radius: float
    outer_radius: float
    ring_radii: tuple = field(default=())

    @cached_property
    def edges(self):
        """Unique undirected edges and the (ncell, 3) cell-to-edge map."""
        loc = np.array(LOCAL_EDGES)
        pairs = self.cells[:, loc]  # (nc, 3, 2)
        flat = np.sort(pairs.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    @cached_property
    def p2_nodes(self) -> np.ndarray:
        edges, _ = self.edges
        mid = 0.5 * (self.vertices[edges[:, 0]] + self.vertices[edges[:, 1]])
        return np.vstack([self.vertices, mid])

    @cached_property
    def p2_cells(self) -> np.ndarray:
        _, cell_edges = self.edges
        return np.hstack([self.cells, cell_edges + len(self.vertices)])

    def edge_index(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        edges, _ = self.edges
        key = np.sort(np.stack([a, b], axis=1), axis=1)
        nv = len(self.vertices)
        codes = edges[:, 0] * nv + edges[:, 1]
        order = np.argsort(codes)
        pos = np.searchsorted(codes[order], key[:, 0] * nv + key[:, 1])
        return order[pos]

    def cell_areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def region_cells(self, region: str) -> np.ndarray:
        if region == "ALL":
            return np.arange(len(self.cells))
        if region not in REGIONS:
            raise TagError(f"unknown region tag {region!r}")
        return np.flatnonzero(self.region_tags == region)

    def tagged_edges(self, tag: str) -> np.ndarray:
        if tag not in BOUNDARIES:
            raise TagError(f"unknown boundary tag {tag!r}")
        return self.boundary_edges[self.boundary_tags == tag]

    @cached_property
    def h_max(self) -> float:
        edges, _ = self.edges
        return float(np.max(np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1)))

    @cached_property
    def _locator(self):
        cen = self.vertices[self.cells].mean(axis=1)
        return cKDTree(cen)

    def locate(self, points: np.ndarray, cells: np.ndarray | None = None, k: int = 12, tol: float = 1e-12):
        """Cell index and reference coordinates of each point (cell -1 if outside)."""
        points = np.atleast_2d(points)
        k = min(k, len(self.cells))
        _, cand = self._locator.query(points, k=k)
        cand = cand.reshape(len(points), k)
        found = np.full(len(points), -1)
        ref = np.zeros((len(points), 2))
        best = np.full(len(points), -np.inf)
        for j in range(k):
            c = cand[:, j]
            p = self.vertices[self.cells[c]]
            d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
            r = points - p[:, 0]
            xi = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
            eta = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
            score = np.minimum(np.minimum(xi, eta), 1 - xi - eta)
            take = (score > best) & (score > -1e-9 - tol if tol else True)
            if cells is not None:
                take &= np.isin(c, cells)
            found = np.where(take, c, found)
            ref = np.where(take[:, None], np.stack([xi, eta], axis=1), ref)
            best = np.where(take, score, best)
        found[best < -1e-9] = -1
        return found, ref


def _ring_counts(radii, h):
    counts = []
    for r in radii:
        counts.append(max(6, int(round(2 * math.pi * r / h))))
    return counts


def _subdivide(r0, r1, h):
    n = max(1, int(math.ceil((r1 - r0) / h - 1e-9)))
    return list(np.linspace(r0, r1, n + 1)[1:])


def _zip_rings(ia, aa, ib, ab):
    """Triangulate the band between two closed rings given by sorted angles."""
    na, nb = len(ia), len(ib)
    tris = []
    i = j = 0
    # Unwrap angles so both sequences start near the same angle.
    a_ang = np.concatenate([aa, aa[:1] + 2 * math.pi])
    b_ang = np.concatenate([ab, ab[:1] + 2 * math.pi])
    shift = int(np.argmin(np.abs(((ab - aa[0]) + math.pi) % (2 * math.pi) - math.pi)))
    b_idx = np.roll(np.arange(nb), -shift)
    b_ang = np.concatenate([ab[b_idx], ab[b_idx[:1]]])
    b_ang = np.unwrap(b_ang)
    b_ang += 2 * math.pi * np.round((a_ang[0] - b_ang[0]) / (2 * math.pi))
    if b_ang[-1] - b_ang[0] < 2 * math.pi - 1e-9:
        b_ang[-1] += 2 * math.pi
    while i < na or j < nb:
        ai, aj = ia[i % na], ia[(i + 1) % na]
        bi, bj = ib[b_idx[j % nb]], ib[b_idx[(j + 1) % nb]]
        adv_a = i < na and (j >= nb or a_ang[i + 1] <= b_ang[j + 1])
        if adv_a:
            tris.append((ai, aj, bi))
            i += 1
        else:
            tris.append((ai, bj, bi))
            j += 1
    return tris


def build_disk_in_disk_mesh(
    solid_radius: float, outer_radius: float, h_target: float, extra_radii=()
) -> Mesh:
    """Ring-structured triangulation of the outer disk with the solid disk inside.

    ``extra_radii`` are fluid radii that must coincide with a vertex ring
    (used for the cut-off plateau of the rigid extension).
    """
    if not (np.isfinite(solid_radius) and np.isfinite(outer_radius) and np.isfinite(h_target)):
        raise InvalidGeometry("radii and mesh size must be finite")
    if not 0 < solid_radius < outer_radius:
        raise InvalidGeometry(
            f"need 0 < solid_radius < outer_radius, got {solid_radius}, {outer_radius}"
        )
    if h_target <= 0:
        raise InvalidGeometry(f"h_target must be positive, got {h_target}")
    a, R = float(solid_radius), float(outer_radius)
    solid_r = _subdivide(0.0, a, h_target)
    stops = sorted({r for r in extra_radii if a < r < R} | {R})
    fluid_r, r0 = [], a
    for s in stops:
        fluid_r += _subdivide(r0, s, h_target)
        r0 = s
    radii = solid_r + fluid_r
    counts = _ring_counts(radii, h_target)
    # Keep the innermost ring coarse enough to fan around the centre.
    counts[0] = max(6, min(counts[0], 8))
    verts = [np.zeros(2)]
    rings = []
    for k, (r, n) in enumerate(zip(radii, counts)):
        off = (k % 2) * math.pi / n
        ang = off + 2 * math.pi * np.arange(n) / n
        start = len(verts)
        verts.extend(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        rings.append((np.arange(start, start + n), np.mod(ang, 2 * math.pi)))
    verts = np.array(verts)
    tris, region = [], []
    n0 = len(rings[0][0])
    for m in range(n0):
        tris.append((0, rings[0][0][m], rings[0][0][(m + 1) % n0]))
        region.append(SOLID)
    n_solid_rings = len(solid_r)
    for k in range(len(rings) - 1):
        ia, aa = rings[k]
        ib, ab = rings[k + 1]
        oa, ob = np.argsort(aa), np.argsort(ab)
        band = _zip_rings(ia[oa], aa[oa], ib[ob], ab[ob])
        tris.extend(band)
        region.extend([SOLID if k + 1 < n_solid_rings else FLUID] * len(band))
    cells = np.array(tris, dtype=np.int64)
    p = verts[cells]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    bedges, btags = [], []
    for idx, tag in ((rings[n_solid_rings - 1][0], SOLID_BOUNDARY), (rings[-1][0], OUTER_BOUNDARY)):
        n = len(idx)
        for m in range(n):
            bedges.append((idx[m], idx[(m + 1) % n]))
            btags.append(tag)
    mesh = Mesh(
        vertices=verts,
        cells=cells,
        boundary_edges=np.array(bedges, dtype=np.int64),
        boundary_tags=np.array(btags),
        region_tags=np.array(region),
        solid_radius=a,
        outer_radius=R,
        ring_radii=tuple(float(r) for r in radii),
    )
    check_mesh(mesh)
    return mesh


def check_mesh(mesh: Mesh) -> None:
    """Validate the structural invariants; raise InvalidGeometry on failure."""
    if np.any(mesh.cell_areas() <= 0):
        raise InvalidGeometry("cells with non-positive signed area")
    for tag in BOUNDARIES:
        e = mesh.tagged_edges(tag)
        if len(e) < 3:
            raise InvalidGeometry(f"{tag} has fewer than three facets")
        # closed curve: every vertex appears exactly twice
        _, cnt = np.unique(e, return_counts=True)
        if np.any(cnt != 2):
            raise InvalidGeometry(f"{tag} facets do not form a closed curve")
    edges, cell_edges = mesh.edges
    use = np.bincount(cell_edges.ravel(), minlength=len(edges))
    bset = mesh.edge_index(mesh.boundary_edges[:, 0], mesh.boundary_edges[:, 1])
    outer = mesh.edge_index(*mesh.tagged_edges(OUTER_BOUNDARY).T)
    if np.any(use[outer] != 1) or np.any(use > 2):
        raise InvalidGeometry("triangulation is not conforming")
    free = np.setdiff1d(np.flatnonzero(use == 1), bset)
    if len(free):
        raise InvalidGeometry("untagged boundary facets present")


class Space:
    """P2 vector / P1 scalar Lagrange spaces on a region of the mesh."""

    def __init__(self, mesh: Mesh, region: str = FLUID):
        self.mesh = mesh
        self.region = region
        self.cells = mesh.region_cells(region)
        gdofs = mesh.p2_cells[self.cells]
        self.global_nodes, local = np.unique(gdofs, return_inverse=True)
        self.cell_dofs = local.reshape(-1, 6)
        self.nodes = mesh.p2_nodes[self.global_nodes]
        self.n = len(self.global_nodes)
        gv = mesh.cells[self.cells]
        self.p1_global, p1loc = np.unique(gv, return_inverse=True)
        self.cell_p1 = p1loc.reshape(-1, 3)
        self.n_p1 = len(self.p1_global)
        self._g2l = {int(g): i for i, g in enumerate(self.global_nodes)}
        self._geometry()

    # ----- geometry ---------------------------------------------------------
    def _geometry(self):
        p = self.mesh.vertices[self.mesh.cells[self.cells]]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.area = 0.5 * det
        # gradients of barycentric coordinates, (nc, 3, 2)
        gl = np.empty((len(p), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            gl[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / det
            gl[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / det
        self.grad_lambda = gl
        self.corner = p
        val, dval = p2_shape(TRI_POINTS)
        self.qval = val  # (nq, 6)
        self.qgrad = np.einsum("qiv,cvd->cqid", dval, gl)  # (nc, nq, 6, 2)
        self.qhess = np.einsum("iab,cad,cbe->cide", p2_second_barycentric(), gl, gl)  # (nc, 6, 2, 2)
        self.qweight = self.area[:, None] * TRI_WEIGHTS[None, :]  # (nc, nq)
        self.qpoints = np.einsum("qi,cid->cqd", self._lam(TRI_POINTS), p)
        self.p1val = self._lam(TRI_POINTS)  # (nq, 3)
        self.p1grad = gl  # (nc, 3, 2)

    @staticmethod
    def _lam(ref):
        ref = np.atleast_2d(ref)
        return np.stack([1 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]], axis=1)

    def local(self, global_ids) -> np.ndarray:
        return np.array([self._g2l[int(g)] for g in np.atleast_1d(global_ids)], dtype=np.int64)

    # ----- boundary data ----------------------------------------------------
    @cached_property
    def boundary(self) -> dict:
        """Per tag: edge dofs (m, 3) [a, mid, b], normals, lengths, adjacent cell info."""
        mesh = self.mesh
        out = {}
        cell_pos = -np.ones(len(mesh.cells), dtype=np.int64)
        cell_pos[self.cells] = np.arange(len(self.cells))
        edges, cell_edges = mesh.edges
        edge_cell = {}
        for ci, c in enumerate(self.cells):
            for k in range(3):
                edge_cell.setdefault(int(cell_edges[c, k]), (ci, k))
        for tag in BOUNDARIES:
            e = mesh.tagged_edges(tag)
            if len(e) == 0:
                continue
            eid = mesh.edge_index(e[:, 0], e[:, 1])
            if not all(int(i) in edge_cell for i in eid):
                continue
            cinfo = np.array([edge_cell[int(i)] for i in eid])
            xa, xb = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
            t = xb - xa
            length = np.linalg.norm(t, axis=1)
            nrm = np.stack([t[:, 1], -t[:, 0]], axis=1) / length[:, None]
            mid = 0.5 * (xa + xb)
            sgn = np.sign(np.einsum("ij,ij->i", nrm, mid))
            nrm *= sgn[:, None]
            gmid = eid + len(mesh.vertices)
            dofs = np.stack([self.local(e[:, 0]), self.local(gmid), self.local(e[:, 1])], axis=1)
            # edge quadrature points and their reference coordinates in the adjacent cell
            s = EDGE_POINTS
            pts = xa[:, None, :] + s[None, :, None] * t[:, None, :]
            ref = np.empty((len(e), len(s), 2))
            for m, (ci, _) in enumerate(cinfo):
                p = self.corner[ci]
                jac = np.array([p[1] - p[0], p[2] - p[0]]).T
                ref[m] = np.linalg.solve(jac, (pts[m] - p[0]).T).T
            val = np.empty((len(e), len(s), 6))
            grad = np.empty((len(e), len(s), 6, 2))
            for m, (ci, _) in enumerate(cinfo):
                v, dv = p2_shape(ref[m])
                val[m] = v
                grad[m] = np.einsum("qiv,vd->qid", dv, self.grad_lambda[ci])
            p1v = np.stack([self._lam(ref[m]) for m in range(len(e))])
            out[tag] = dict(
                edges=e,
                dofs=dofs,
                normal=nrm,
                length=length,
                cell=cinfo[:, 0],
                points=pts,
                weight=length[:, None] * EDGE_WEIGHTS[None, :],
                val=val,
                grad=grad,
                p1val=p1v,
                trace_val=np.stack(
                    [(1 - s) * (1 - 2 * s), 4 * s * (1 - s), s * (2 * s - 1)], axis=1
                ),
            )
        return out

    def boundary_nodes(self, tag: str) -> np.ndarray:
        if tag not in BOUNDARIES:
            raise TagError(f"unknown boundary tag {tag!r}")
        if tag not in self.boundary:
            raise TagError(f"{tag} is not adjacent to region {self.region}")
        return np.unique(self.boundary[tag]["dofs"])

    def boundary_p1(self, tag: str) -> np.ndarray:
        e = self.mesh.tagged_edges(tag)
        lookup = {int(g): i for i, g in enumerate(self.p1_global)}
        return np.array(sorted({lookup[int(v)] for v in e.ravel()}), dtype=np.int64)

    # ----- field evaluation -------------------------------------------------
    def at_quad(self, values: np.ndarray) -> np.ndarray:
        """Values at cell quadrature points, shape (nc, nq, ...)."""
        return np.einsum("qi,ci...->cq...", self.qval, values[self.cell_dofs])

    def grad_at_quad(self, values: np.ndarray) -> np.ndarray:
        """Gradient at quadrature points; for vector fields g[..., i, j] = d_j u_i."""
        loc = values[self.cell_dofs]
        if loc.ndim == 2:
            return np.einsum("cqid,ci->cqd", self.qgrad, loc)
        return np.einsum("cqid,cik->cqkd", self.qgrad, loc)

    def hess(self, values: np.ndarray) -> np.ndarray:
        """Cellwise constant Hessian; vector fields give (nc, k, 2, 2)."""
        loc = values[self.cell_dofs]
        if loc.ndim == 2:
            return np.einsum("cide,ci->cde", self.qhess, loc)
        return np.einsum("cide,cik->ckde", self.qhess, loc)

    def p1_at_quad(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("qi,ci->cq", self.p1val, values[self.cell_p1])

    def p1_grad(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("cid,ci->cd", self.p1grad, values[self.cell_p1])

    def trace(self, values: np.ndarray, tag: str) -> np.ndarray:
        b = self.boundary[tag]
        return np.einsum("qi,mi...->mq...", b["trace_val"], values[b["dofs"]])

    def trace_grad(self, values: np.ndarray, tag: str) -> np.ndarray:
        """One-sided gradient at edge quadrature points from the adjacent region cell."""
        b = self.boundary[tag]
        loc = values[self.cell_dofs[b["cell"]]]
        if loc.ndim == 2:
            return np.einsum("mqid,mi->mqd", b["grad"], loc)
        return np.einsum("mqid,mik->mqkd", b["grad"], loc)

    def interpolate(self, func) -> np.ndarray:
        return np.asarray(func(self.nodes))

    # ----- load vectors -----------------------------------------------------
    def load(self, qvalues: np.ndarray) -> np.ndarray:
        """Assemble int f . phi_i from values at quadrature points (nc, nq[, k])."""
        w = self.qweight
        if qvalues.ndim == 2:
            loc = np.einsum("cq,qi,cq->ci", w, self.qval, qvalues)
            return np.bincount(self.cell_dofs.ravel(), loc.ravel(), minlength=self.n)
        loc = np.einsum("cq,qi,cqk->cik", w, self.qval, qvalues)
        out = np.zeros((self.n, qvalues.shape[-1]))
        for k in range(qvalues.shape[-1]):
            out[:, k] = np.bincount(self.cell_dofs.ravel(), loc[:, :, k].ravel(), minlength=self.n)
        return out

    def load_grad(self, qmat: np.ndarray) -> np.ndarray:
        """Assemble int A : grad(phi_i e_k) from matrix values (nc, nq, 2, 2)."""
        loc = np.einsum("cq,cqid,cqkd->cik", self.qweight, self.qgrad, qmat)
        out = np.zeros((self.n, 2))
        for k in range(2):
            out[:, k] = np.bincount(self.cell_dofs.ravel(), loc[:, :, k].ravel(), minlength=self.n)
        return out

    def load_p1(self, qvalues: np.ndarray) -> np.ndarray:
        loc = np.einsum("cq,qi,cq->ci", self.qweight, self.p1val, qvalues)
        return np.bincount(self.cell_p1.ravel(), loc.ravel(), minlength=self.n_p1)

    def boundary_load(self, tag: str, qvalues: np.ndarray) -> np.ndarray:
        """Assemble the edge integral of f . phi_i over a tagged boundary."""
        b = self.boundary[tag]
        w = b["weight"]
        if qvalues.ndim == 2:
            loc = np.einsum("mq,qi,mq->mi", w, b["trace_val"], qvalues)
            return np.bincount(b["dofs"].ravel(), loc.ravel(), minlength=self.n)
        loc = np.einsum("mq,qi,mqk->mik", w, b["trace_val"], qvalues)
        out = np.zeros((self.n, qvalues.shape[-1]))
        for k in range(qvalues.shape[-1]):
            out[:, k] = np.bincount(b["dofs"].ravel(), loc[:, :, k].ravel(), minlength=self.n)
        return out


@dataclass(frozen=True, eq=False)
class VectorField:
    space: Space
    values: np.ndarray  # (n, 2)
    space_tag: str = "P2"

    def __post_init__(self):
        if self.values.shape != (self.space.n, 2):
            raise ValueError(f"expected {(self.space.n, 2)} dofs, got {self.values.shape}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    space: Space
    values: np.ndarray
    space_tag: str = "P2"

    def __post_init__(self):
        n = self.space.n if self.space_tag == "P2" else self.space.n_p1
        if self.values.shape != (n,):
            raise ValueError(f"expected {n} dofs for {self.space_tag}, got {self.values.shape}")


def cross(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Planar cross product y1 v2 - y2 v1."""
    return y[..., 0] * v[..., 1] - y[..., 1] * v[..., 0]


def perp(v: np.ndarray) -> np.ndarray:
    """Rotation by +90 degrees, so that omega ^ v = omega * perp(v)."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _boundary_values(f, space: Space, tag: str):
    b = space.boundary[tag]
    if callable(f):
        return np.asarray(f(b["points"]))
    if isinstance(f, (VectorField, ScalarField)):
        if f.space_tag == "P1":
            return np.einsum("mqi,mi->mq", b["p1val"], f.values[space.cell_p1[b["cell"]]])
        return space.trace(f.values, tag)
    arr = np.asarray(f, dtype=float)
    if arr.shape[:2] == b["points"].shape[:2]:
        return arr
    return np.broadcast_to(arr, b["points"].shape[:2] + arr.shape)


def boundary_integral(f, tag: str, weight: str = "plain", space: Space | None = None):
    """Edge quadrature of a field over a tagged boundary curve.

    ``weight``: ``"normal"`` gives the flux (vector f) or ``f n`` (matrix f);
    ``"cross_normal"`` gives the integral of y ^ (f n) for matrix f or y ^ f n
    for scalar f; ``"cross"`` gives y ^ f; ``"plain"`` integrates f itself.
    """
    if tag not in BOUNDARIES:
        raise TagError(f"unknown boundary tag {tag!r}")
    if space is None:
        if isinstance(f, (VectorField, ScalarField)):
            space = f.space
        else:
            raise TypeError("space is required for non-field integrands")
    if tag not in space.boundary:
        raise TagError(f"{tag} is not adjacent to region {space.region}")
    b = space.boundary[tag]
    vals = _boundary_values(f, space, tag)
    n = b["normal"][:, None, :]
    y = b["points"]
    w = b["weight"]
    if weight == "plain":
        integrand = vals
    elif weight == "normal":
        if vals.ndim == 4:
            integrand = np.einsum("mqij,mqj->mqi", vals, np.broadcast_to(n, y.shape))
        elif vals.ndim == 3:
            integrand = np.einsum("mqi,mqi->mq", vals, np.broadcast_to(n, y.shape))
        else:
            integrand = vals[..., None] * n
    elif weight == "cross_normal":
        if vals.ndim == 4:
            integrand = cross(y, np.einsum("mqij,mqj->mqi", vals, np.broadcast_to(n, y.shape)))
        elif vals.ndim == 2:
            integrand = cross(y, vals[..., None] * n)
        else:
            raise ValueError("cross_normal needs a scalar or matrix integrand")
    elif weight == "cross":
        integrand = cross(y, vals)
    else:
        raise ValueError(f"unknown weight {weight!r}")
    return np.einsum("mq,mq...->...", w, integrand)


def volume_integral(f, region: str = SOLID, weight: str = "plain", space: Space | None = None):
    """Cell quadrature of a field or callable over a tagged region.

    ``weight``: ``"plain"``, ``"cross"`` (y ^ f) or ``"second_moment"`` (|y|^2 f).
    """
    if region not in REGIONS:
        raise TagError(f"unknown region tag {region!r}")
    if isinstance(f, (VectorField, ScalarField)):
        space = f.space
        if space.region != region:
            raise TagError(f"field lives on {space.region}, not {region}")
        vals = space.p1_at_quad(f.values) if f.space_tag == "P1" else space.at_quad(f.values)
    else:
        if space is None or space.region != region:
            raise TypeError("a Space on the requested region is required")
        if callable(f):
            vals = np.asarray(f(space.qpoints))
        else:
            vals = np.broadcast_to(np.asarray(f, dtype=float), space.qpoints.shape[:2] + np.shape(f))
    y = space.qpoints
    if weight == "plain":
        integrand = vals
    elif weight == "cross":
        integrand = cross(y, vals)
    elif weight == "second_moment":
        r2 = np.einsum("cqd,cqd->cq", y, y)
        integrand = r2[..., None] * vals if vals.ndim == 3 else r2 * vals
    else:
        raise ValueError(f"unknown weight {weight!r}")
    return np.einsum("cq,cq...->...", space.qweight, integrand)


def write_mesh(mesh: Mesh, path) -> None:
    """Plain-text mesh: header, vertex list, cell list with region, tagged edges."""
    lines = [
        "# swimctl mesh v1",
        f"radii {float(mesh.solid_radius)!r} {float(mesh.outer_radius)!r}",
        f"vertices {len(mesh.vertices)}",
    ]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(f"cells {len(mesh.cells)}")
    lines += [f"{a} {b} {c} {r}" for (a, b, c), r in zip(mesh.cells, mesh.region_tags)]
    lines.append(f"boundary_edges {len(mesh.boundary_edges)}")
    lines += [f"{a} {b} {t}" for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags)]
    lines.append(f"rings {' '.join(repr(float(r)) for r in mesh.ring_radii)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path) -> Mesh:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MeshFileError(f"cannot read mesh file ({exc.strerror})", path) from exc
    try:
        it = iter(line for line in text if line.strip() and not line.startswith("#"))
        head = next(it).split()
        if head[0] != "radii":
            raise ValueError(f"expected 'radii' header, got {head[0]!r}")
        a, R = float(head[1]), float(head[2])
        nv = _count(next(it), "vertices")
        verts = np.array([[float(t) for t in next(it).split()] for _ in range(nv)])
        nc = _count(next(it), "cells")
        cells, regions = [], []
        for _ in range(nc):
            tok = next(it).split()
            cells.append([int(t) for t in tok[:3]])
            regions.append(tok[3])
        nb = _count(next(it), "boundary_edges")
        bedges, btags = [], []
        for _ in range(nb):
            tok = next(it).split()
            bedges.append([int(tok[0]), int(tok[1])])
            btags.append(tok[2])
        rings = next(it, "rings").split()[1:]
        mesh = Mesh(
            vertices=verts.reshape(-1, 2),
            cells=np.array(cells, dtype=np.int64).reshape(-1, 3),
            boundary_edges=np.array(bedges, dtype=np.int64).reshape(-1, 2),
            boundary_tags=np.array(btags),
            region_tags=np.array(regions),
            solid_radius=a,
            outer_radius=R,
            ring_radii=tuple(float(r) for r in rings),
        )
        if set(regions) - set(REGIONS) or set(btags) - set(BOUNDARIES):
            raise ValueError("unknown tag")
        if cells and (np.max(cells) >= nv or np.min(cells) < 0):
            raise ValueError("cell index out of range")
        check_mesh(mesh)
    except (StopIteration, ValueError, AssertionError, IndexError, InvalidGeometry) as exc:
        raise MeshFileError(f"corrupted mesh file ({str(exc) or type(exc).__name__})", path) from exc
    return mesh


def _count(line: str, key: str) -> int:
    tok = line.split()
    if tok[0] != key:
        raise ValueError(f"expected section {key!r}, got {tok[0]!r}")
    return int(tok[1])
