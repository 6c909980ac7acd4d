"""Admissible triangulations for cell-centered finite volumes.

A :class:`Mesh` stores everything as flat numpy arrays so the solver,
reconstruction and estimators can work cellwise or edgewise without Python
loops. Local edge ``k`` of a cell is the edge opposite local vertex ``k``.

Vertex tags follow the plain-text format: 0 interior, 1 Neumann,
``2 + k`` Dirichlet component ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

INTERIOR, NEUMANN, DIRICHLET, UNTAGGED = 0, 1, 2, -1

SIDES = ("left", "right", "bottom", "top")
# sides sharing a corner of the unit square
_ADJACENT = {("left", "bottom"), ("left", "top"), ("right", "bottom"), ("right", "top")}


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    detail: str

    def __str__(self):
        return f"{self.kind} [{self.index}]: {self.detail}"


def circumcenters(points: np.ndarray) -> np.ndarray:
    """Circumcenters of triangles given as an (m, 3, 2) array."""
    a, b, c = points[:, 0], points[:, 1], points[:, 2]
    ba = b - a
    ca = c - a
    d = 2.0 * (ba[:, 0] * ca[:, 1] - ba[:, 1] * ca[:, 0])
    nb = np.sum(ba**2, axis=1)
    nc = np.sum(ca**2, axis=1)
    ux = (ca[:, 1] * nb - ba[:, 1] * nc) / d
    uy = (ba[:, 0] * nc - ca[:, 0] * nb) / d
    return a + np.column_stack([ux, uy])


class Mesh:
    """Triangulation with collocation points, oriented edges and boundary tags.

    Edge normals are stored once, pointing out of ``edge_cells[:, 0]``;
    ``cell_edge_sign`` gives the orientation seen from each cell.
    """

    n_boundary_max = 3  # N_partial for triangles

    def __init__(self, vertices, vertex_tags, cells, centers=None, boundary_edge_kinds=None):
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        vertex_tags = np.asarray(vertex_tags, dtype=int).reshape(-1)
        cells = np.array(cells, dtype=int).reshape(-1, 3)
        if len(vertex_tags) != len(vertices):
            raise MeshError("one tag per vertex required")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell refers to an unknown vertex")

        p = vertices[cells]
        signed = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        if np.any(np.abs(signed) <= 1e-14 * max(1.0, np.abs(signed).max(initial=0.0))):
            bad = int(np.argmin(np.abs(signed)))
            raise MeshError(f"cell {bad} is degenerate (zero area)")
        flip = signed < 0
        cells[flip] = cells[flip][:, [0, 2, 1]]

        self.vertices = vertices
        self.vertex_tags = vertex_tags
        self.cells = cells
        p = vertices[cells]
        self.areas = np.abs(signed)
        self.centers = circumcenters(p) if centers is None else np.asarray(centers, dtype=float).reshape(-1, 2)
        lens = np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3], axis=1) for k in range(3)], axis=1)
        self.diameters = lens.max(axis=1)

        self._build_edges(boundary_edge_kinds)
        self._build_geometry()
        for arr in self.__dict__.values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    # ------------------------------------------------------------------ setup
    def _build_edges(self, boundary_edge_kinds):
        nc = len(self.cells)
        local = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = self.cells[:, local]  # (nc, 3, 2)
        key = np.sort(pairs, axis=2).reshape(-1, 2)
        uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two cells")
        ne = len(uniq)
        edge_cells = -np.ones((ne, 2), dtype=int)
        cell_edges = inverse.reshape(nc, 3)
        owner = np.repeat(np.arange(nc), 3)
        for flat, e in enumerate(inverse):
            slot = 0 if edge_cells[e, 0] < 0 else 1
            edge_cells[e, slot] = owner[flat]
        # orient each edge as seen (counter-clockwise) from its first cell
        edges = np.empty((ne, 2), dtype=int)
        for e in range(ne):
            K = edge_cells[e, 0]
            k = int(np.nonzero(cell_edges[K] == e)[0][0])
            edges[e] = self.cells[K, local[k]]
        sign = np.where(edge_cells[cell_edges, 0] == np.arange(nc)[:, None], 1.0, -1.0)

        kind = np.full(ne, INTERIOR)
        comp = np.full(ne, -1)
        bnd = edge_cells[:, 1] < 0
        for e in np.nonzero(bnd)[0]:
            a, b = edges[e]
            if boundary_edge_kinds is not None and (min(a, b), max(a, b)) in boundary_edge_kinds:
                k_, c_ = boundary_edge_kinds[(min(a, b), max(a, b))]
                kind[e], comp[e] = k_, c_
                continue
            ta, tb = self.vertex_tags[a], self.vertex_tags[b]
            if ta >= 2 and ta == tb:
                kind[e], comp[e] = DIRICHLET, ta - 2
            elif ta >= 1 and tb >= 1:
                kind[e] = NEUMANN
            else:
                kind[e] = UNTAGGED

        self.edges = edges
        self.edge_cells = edge_cells
        self.cell_edges = cell_edges
        self.cell_edge_sign = sign
        self.edge_kind = kind
        self.edge_component = comp

    def _build_geometry(self):
        va = self.vertices[self.edges[:, 0]]
        vb = self.vertices[self.edges[:, 1]]
        t = vb - va
        self.edge_lengths = np.linalg.norm(t, axis=1)
        self.edge_midpoints = 0.5 * (va + vb)
        # counter-clockwise orientation from the first cell: outward normal is (t_y, -t_x)
        self.edge_normals = np.column_stack([t[:, 1], -t[:, 0]]) / self.edge_lengths[:, None]
        K = self.edge_cells[:, 0]
        L = self.edge_cells[:, 1]
        interior = L >= 0
        d = np.empty(len(self.edges))
        d[interior] = np.linalg.norm(self.centers[L[interior]] - self.centers[K[interior]], axis=1)
        # distance from x_K to the boundary edge segment
        xk = self.centers[K[~interior]]
        a = va[~interior]
        tt = t[~interior]
        s = np.clip(np.sum((xk - a) * tt, axis=1) / np.sum(tt * tt, axis=1), 0.0, 1.0)
        d[~interior] = np.linalg.norm(xk - (a + s[:, None] * tt), axis=1)
        self.d_sigma = d
        # local vertex index, inside each adjacent cell, of the edge's start/end vertex
        loc = -np.ones((len(self.edges), 2, 2), dtype=int)
        for side in (0, 1):
            cells = self.edge_cells[:, side]
            ok = cells >= 0
            cv = self.cells[cells[ok]]
            loc[ok, side, 0] = np.argmax(cv == self.edges[ok, 0][:, None], axis=1)
            loc[ok, side, 1] = np.argmax(cv == self.edges[ok, 1][:, None], axis=1)
        self.edge_local_vertices = loc

    # ------------------------------------------------------------ properties
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def interior_edges(self) -> np.ndarray:
        return np.nonzero(self.edge_kind == INTERIOR)[0]

    @cached_property
    def neumann_edges(self) -> np.ndarray:
        return np.nonzero(self.edge_kind == NEUMANN)[0]

    @cached_property
    def dirichlet_edges(self) -> np.ndarray:
        return np.nonzero(self.edge_kind == DIRICHLET)[0]

    @cached_property
    def n_dirichlet_components(self) -> int:
        comps = self.vertex_tags[self.vertex_tags >= 2] - 2
        return int(comps.max()) + 1 if comps.size else 0

    @cached_property
    def transmissibility(self) -> np.ndarray:
        return self.edge_lengths / self.d_sigma

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """(ncells, 3, 2): gradient of each barycentric coordinate."""
        p = self.vertices[self.cells]
        g = np.empty((self.n_cells, 3, 2))
        for k in range(3):
            a = p[:, (k + 1) % 3]
            b = p[:, (k + 2) % 3]
            # rotate the opposite edge inward and scale by 1 / (2 |K|)
            g[:, k, 0] = -(b[:, 1] - a[:, 1])
            g[:, k, 1] = b[:, 0] - a[:, 0]
        g /= (2.0 * self.areas)[:, None, None]
        return g

    @cached_property
    def domain_area(self) -> float:
        """|Omega| from the boundary polygon (independent of cell areas)."""
        b = np.nonzero(self.edge_cells[:, 1] < 0)[0]
        a = self.vertices[self.edges[b, 0]]
        c = self.vertices[self.edges[b, 1]]
        return float(0.5 * np.sum(a[:, 0] * c[:, 1] - c[:, 0] * a[:, 1]))

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        hull = v[np.unique(self.edges[self.edge_cells[:, 1] < 0])]
        diff = hull[:, None, :] - hull[None, :, :]
        return float(np.sqrt(np.max(np.sum(diff**2, axis=2))))

    @cached_property
    def h(self) -> float:
        return float(self.diameters.max())

    def map_points(self, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates (ncells, npts, 2) of barycentric points."""
        return np.einsum("pk,ckd->cpd", np.asarray(bary), self.vertices[self.cells])

    def edge_points(self, s: np.ndarray) -> np.ndarray:
        """Physical coordinates (nedges, npts, 2) of edge parameters ``s``."""
        s = np.asarray(s)[None, :, None]
        va = self.vertices[self.edges[:, 0]][:, None, :]
        vb = self.vertices[self.edges[:, 1]][:, None, :]
        return (1.0 - s) * va + s * vb

    def edge_bary(self, s: np.ndarray, side: int, edges=None) -> np.ndarray:
        """Barycentric coordinates (m, npts, 3), in the cell on ``side``, of edge points."""
        edges = np.arange(self.n_edges) if edges is None else np.asarray(edges)
        s = np.asarray(s)
        loc = self.edge_local_vertices[edges, side]
        out = np.zeros((len(edges), len(s), 3))
        rows = np.arange(len(edges))[:, None]
        out[rows, np.arange(len(s))[None, :], loc[:, 0][:, None]] = 1.0 - s[None, :]
        out[rows, np.arange(len(s))[None, :], loc[:, 1][:, None]] = s[None, :]
        return out

    def cell_normals(self) -> np.ndarray:
        """(ncells, 3, 2) outward unit normals on each local edge."""
        return self.edge_normals[self.cell_edges] * self.cell_edge_sign[..., None]


# ---------------------------------------------------------------- generation
def _dirichlet_components(sides):
    sides = [s for s in SIDES if s in set(sides)]
    unknown = set(sides) - set(SIDES)
    if unknown:
        raise ValueError(f"unknown sides {sorted(unknown)}")
    parent = {s: s for s in sides}

    def find(s):
        while parent[s] != s:
            s = parent[s]
        return s

    for a in sides:
        for b in sides:
            if (a, b) in _ADJACENT:
                parent[find(b)] = find(a)
    roots = []
    comp = {}
    for s in sides:
        r = find(s)
        if r not in roots:
            roots.append(r)
        comp[s] = roots.index(r)
    return comp


def structured_pattern(n: int):
    """Vertices and cells of the offset-row pattern on the unit square.

    Row ``r`` of vertices sits at ``y = r h``; even rows have vertices at
    ``x = k h``, odd rows at ``0, h/2, 3h/2, ..., 1``. Between two rows lie
    ``n`` isosceles triangles with their base on the even row, ``n - 1``
    with their base on the odd row, and two right triangles closing the
    row at ``x = 0`` and ``x = 1``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h = 1.0 / n
    rows = []
    verts = []
    for r in range(n + 1):
        if r % 2 == 0:
            xs = [k * h for k in range(n + 1)]
        else:
            xs = [0.0] + [(k + 0.5) * h for k in range(n)] + [1.0]
        ids = list(range(len(verts), len(verts) + len(xs)))
        verts.extend((x, r * h) for x in xs)
        rows.append(ids)
    cells = []
    for r in range(n):
        lo, hi = rows[r], rows[r + 1]
        even, odd = (lo, hi) if r % 2 == 0 else (hi, lo)
        # even[k] at x = k h; odd[0] at 0, odd[k + 1] at (k + 1/2) h, odd[-1] at 1
        for k in range(n):
            cells.append((even[k], even[k + 1], odd[k + 1]))
        for k in range(n - 1):
            cells.append((odd[k + 1], odd[k + 2], even[k + 1]))
        cells.append((even[0], odd[1], odd[0]))
        cells.append((even[n], odd[n + 1], odd[n]))
    return np.array(verts), np.array(cells), h


def build_structured_mesh(n: int, dirichlet_sides=("left", "right")) -> Mesh:
    """Admissible mesh of the unit square with characteristic width 1/n.

    Collocation points are circumcenters. Corners touching a Dirichlet side
    are tagged Dirichlet.
    """
    verts, cells, h = structured_pattern(n)
    comp = _dirichlet_components(dirichlet_sides)
    tol = 1e-12

    def sides_of(pt):
        x, y = pt
        out = []
        if abs(x) < tol:
            out.append("left")
        if abs(x - 1.0) < tol:
            out.append("right")
        if abs(y) < tol:
            out.append("bottom")
        if abs(y - 1.0) < tol:
            out.append("top")
        return out

    tags = np.zeros(len(verts), dtype=int)
    for v, pt in enumerate(verts):
        s = sides_of(pt)
        if not s:
            continue
        dir_s = [x for x in s if x in comp]
        tags[v] = 2 + comp[dir_s[0]] if dir_s else NEUMANN

    # boundary edge kinds come from the side they lie on, not the end tags
    kinds = {}
    local = ((1, 2), (2, 0), (0, 1))
    for c in cells:
        for i, j in local:
            a, b = c[i], c[j]
            common = set(sides_of(verts[a])) & set(sides_of(verts[b]))
            if common:
                side = common.pop()
                key = (min(a, b), max(a, b))
                kinds[key] = (DIRICHLET, comp[side]) if side in comp else (NEUMANN, -1)
    mesh = Mesh(verts, tags, cells, boundary_edge_kinds=kinds)
    bad = validate_admissibility(mesh)
    if bad:
        raise MeshError(f"generated mesh is not admissible: {bad[0]}")
    return mesh


# ------------------------------------------------------------------------ IO
def load_mesh(text: str) -> Mesh:
    """Parse the plain-text mesh format.

    Header ``vertices N cells M``, then ``N`` lines ``x y tag`` and ``M``
    lines ``v0 v1 v2``. ``#`` starts a comment.
    """
    lines = []
    for no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((no, body.split()))
    if not lines:
        raise MeshFormatError("empty mesh document", 1)
    no, head = lines[0]
    if len(head) != 4 or head[0] != "vertices" or head[2] != "cells":
        raise MeshFormatError("expected header 'vertices N cells M'", no)
    try:
        nv, nc = int(head[1]), int(head[3])
    except ValueError:
        raise MeshFormatError("vertex/cell counts must be integers", no) from None
    if nv < 3 or nc < 1:
        raise MeshFormatError("need at least 3 vertices and 1 cell", no)
    body = lines[1:]
    if len(body) != nv + nc:
        last = body[-1][0] if body else no
        raise MeshFormatError(f"expected {nv + nc} data lines, found {len(body)}", last)
    verts = np.empty((nv, 2))
    tags = np.empty(nv, dtype=int)
    for i, (no, tok) in enumerate(body[:nv]):
        if len(tok) != 3:
            raise MeshFormatError("vertex line must be 'x y tag'", no)
        try:
            verts[i] = float(tok[0]), float(tok[1])
            tags[i] = int(tok[2])
        except ValueError:
            raise MeshFormatError("malformed vertex line", no) from None
        if tags[i] < 0:
            raise MeshFormatError("vertex tag must be >= 0", no)
    cells = np.empty((nc, 3), dtype=int)
    for i, (no, tok) in enumerate(body[nv:]):
        if len(tok) != 3:
            raise MeshFormatError("cell line must be 'v0 v1 v2'", no)
        try:
            ids = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError("malformed cell line", no) from None
        if len(set(ids)) != 3:
            raise MeshFormatError("repeated vertex id in cell", no)
        if min(ids) < 0 or max(ids) >= nv:
            raise MeshFormatError("cell refers to an unknown vertex", no)
        cells[i] = ids
    try:
        return Mesh(verts, tags, cells)
    except MeshError as exc:
        raise MeshFormatError(str(exc), None) from exc


def dump_mesh(mesh: Mesh) -> str:
    out = [f"vertices {mesh.n_vertices} cells {mesh.n_cells}"]
    out += [f"{x!r} {y!r} {t}" for (x, y), t in zip(mesh.vertices.tolist(), mesh.vertex_tags.tolist())]
    out += [" ".join(map(str, c)) for c in mesh.cells.tolist()]
    return "\n".join(out) + "\n"


# ------------------------------------------------------------- admissibility
def validate_admissibility(mesh: Mesh, orth_tol: float = 1e-10, area_tol: float = 1e-12) -> list[Violation]:
    out = []
    p = mesh.vertices[mesh.cells]
    # (a) collocation point in the closed cell
    g = mesh.barycentric_gradients
    lam = np.einsum("ckd,cd->ck", g, mesh.centers - p[:, 0])
    lam0 = 1.0 - lam[:, 1] - lam[:, 2]
    lam = np.column_stack([lam0, lam[:, 1], lam[:, 2]])
    for K in np.nonzero(lam.min(axis=1) < -1e-12)[0]:
        out.append(Violation("center_outside_cell", int(K), f"min barycentric {lam[K].min():.3e}"))
    scale = mesh.diameters[mesh.edge_cells[:, 0]]
    # (c) positive d_sigma
    for e in np.nonzero(mesh.d_sigma <= 1e-12 * scale)[0]:
        out.append(Violation("d_sigma_zero", int(e), f"d_sigma = {mesh.d_sigma[e]:.3e}"))
    # (b) orthogonality, (d) distinct neighbouring points
    for e in mesh.interior_edges:
        K, L = mesh.edge_cells[e]
        diff = mesh.centers[L] - mesh.centers[K]
        d = np.linalg.norm(diff)
        if d <= 1e-12 * scale[e]:
            out.append(Violation("coincident_centers", int(e), f"x_{K} == x_{L}"))
            continue
        res = np.linalg.norm(diff / d - mesh.edge_normals[e])
        if res > orth_tol:
            out.append(Violation("not_orthogonal", int(e), f"residual {res:.3e}"))
    # (e) boundary edges carry a Dirichlet or Neumann tag
    for e in np.nonzero(mesh.edge_kind == UNTAGGED)[0]:
        out.append(Violation("untagged_boundary_edge", int(e), f"edge {tuple(mesh.edges[e])}"))
    # (f) area partition
    rel = abs(mesh.areas.sum() - mesh.domain_area) / abs(mesh.domain_area)
    if rel > area_tol:
        out.append(Violation("area_partition", -1, f"relative mismatch {rel:.3e}"))
    return out


# ------------------------------------------------------------ vertex weights
@dataclass(frozen=True)
class VertexWeights:
    """Interpolation weights from cell values to vertex values.

    ``matrix`` is (n_vertices, n_cells); Dirichlet vertices have empty rows
    and are pinned to boundary data by the reconstruction.
    """

    matrix: sp.csr_matrix
    dirichlet: np.ndarray  # bool mask over vertices

    def stencil(self, vertex: int) -> list[tuple[int, float]]:
        row = self.matrix.getrow(vertex)
        return list(zip(row.indices.tolist(), row.data.tolist()))

    def apply(self, cell_values: np.ndarray) -> np.ndarray:
        return self.matrix @ cell_values


def _stencil_system(mesh: Mesh, a: int, stencil):
    rel = mesh.centers[stencil] - mesh.vertices[a]
    scale = np.abs(rel).max() or 1.0
    M = np.vstack([np.ones(len(stencil)), rel[:, 0] / scale, rel[:, 1] / scale])
    return M, M @ M.T


def vertex_interpolation_weights(mesh: Mesh, cond_limit: float = 1e12) -> VertexWeights:
    """Minimal-norm weights reproducing affine functions at every vertex.

    The stencil is the set of incident cells; where that cannot reproduce
    affine functions (e.g. a corner touching one cell) it is widened once by
    the cells sharing a vertex with it.
    """
    incident = [[] for _ in range(mesh.n_vertices)]
    for K, c in enumerate(mesh.cells):
        for v in c:
            incident[v].append(K)
    dirichlet = mesh.vertex_tags >= 2
    rows, cols, vals = [], [], []
    for a in range(mesh.n_vertices):
        if dirichlet[a]:
            continue
        stencil = incident[a]
        M, G = _stencil_system(mesh, a, stencil)
        if len(stencil) < 3 or np.linalg.cond(G) > cond_limit:
            stencil = sorted({L for K in stencil for v in mesh.cells[K] for L in incident[v]})
            M, G = _stencil_system(mesh, a, stencil)
            if len(stencil) < 3 or np.linalg.cond(G) > cond_limit:
                raise MeshError(f"degenerate interpolation stencil at vertex {a}")
        w = M.T @ np.linalg.solve(G, np.array([1.0, 0.0, 0.0]))
        rows += [a] * len(stencil)
        cols += stencil
        vals += w.tolist()
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_vertices, mesh.n_cells))
    dirichlet.setflags(write=False)
    return VertexWeights(mat, dirichlet)
