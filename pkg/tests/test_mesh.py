import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdiff.mesh import (DIRICHLET, INTERIOR, NEUMANN, Mesh, MeshError, MeshFormatError, build_structured_mesh,
                            dump_mesh, load_mesh, validate_admissibility, vertex_interpolation_weights)


@pytest.mark.parametrize("n,counts", [(1, (5, 3, 7)), (2, (10, 10, 19)), (4, (27, 36, 62)), (8, (85, 136, 220))])
def test_structured_counts(n, counts):
    m = build_structured_mesh(n)
    assert (m.n_vertices, m.n_cells, m.n_edges) == counts
    # Euler characteristic of a disc
    assert m.n_vertices - m.n_edges + m.n_cells == 1


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 12))
def test_structured_admissible(n):
    m = build_structured_mesh(n)
    assert validate_admissibility(m) == []
    assert m.areas.sum() == pytest.approx(1.0, rel=1e-12)
    assert m.h <= 1.5 / n
    ie = m.interior_edges
    K, L = m.edge_cells[ie].T
    d = m.centers[L] - m.centers[K]
    # orthogonality and consistent d_sigma
    cross = d[:, 0] * m.edge_normals[ie, 1] - d[:, 1] * m.edge_normals[ie, 0]
    assert np.abs(cross).max() < 1e-12
    assert np.allclose(np.einsum("ij,ij->i", d, m.edge_normals[ie]), m.d_sigma[ie])
    assert np.all(m.d_sigma > 0)


def test_normals_and_signs():
    m = build_structured_mesh(3)
    cn = m.cell_normals()
    for K in range(m.n_cells):
        for k, e in enumerate(m.cell_edges[K]):
            mid = m.edge_midpoints[e]
            # outward: pointing away from the cell's centroid
            cen = m.vertices[m.cells[K]].mean(axis=0)
            assert np.dot(mid - cen, cn[K, k]) > 0
    ie = m.interior_edges
    K, L = m.edge_cells[ie].T
    # n_K + n_L = 0 on every interior edge
    nk = np.array([cn[a, list(m.cell_edges[a]).index(e)] for a, e in zip(K, ie)])
    nl = np.array([cn[b, list(m.cell_edges[b]).index(e)] for b, e in zip(L, ie)])
    assert np.abs(nk + nl).max() == 0.0


def test_boundary_tags():
    m = build_structured_mesh(4)
    de = m.dirichlet_edges
    x = m.edge_midpoints[de, 0]
    assert np.all((np.abs(x) < 1e-14) | (np.abs(x - 1) < 1e-14))
    assert set(m.edge_component[de].tolist()) == {0, 1}
    assert np.all(m.edge_component[de][x < 0.5] == 0)
    ne = m.neumann_edges
    y = m.edge_midpoints[ne, 1]
    assert np.all((np.abs(y) < 1e-14) | (np.abs(y - 1) < 1e-14))
    assert len(de) + len(ne) + len(m.interior_edges) == m.n_edges
    assert np.all(m.edge_kind[m.interior_edges] == INTERIOR)
    # corners next to a Dirichlet side are Dirichlet vertices
    corners = [i for i, v in enumerate(m.vertices) if v[0] in (0.0, 1.0) and v[1] in (0.0, 1.0)]
    assert np.all(m.vertex_tags[corners] >= 2)


def test_all_neumann_and_all_dirichlet():
    m = build_structured_mesh(3, dirichlet_sides=())
    assert len(m.dirichlet_edges) == 0
    assert np.all(m.edge_kind[m.edge_cells[:, 1] < 0] == NEUMANN)
    m = build_structured_mesh(3, dirichlet_sides=("left", "right", "bottom", "top"))
    assert np.all(m.edge_kind[m.edge_cells[:, 1] < 0] == DIRICHLET)


def test_roundtrip():
    m = build_structured_mesh(4)
    m2 = load_mesh(dump_mesh(m))
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.cells, m2.cells)
    assert np.array_equal(np.sort(m.edge_kind), np.sort(m2.edge_kind))
    assert validate_admissibility(m2) == []


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("verts 3 cells 1\n", 1),
    ("vertices 3 cells 1\n0 0 1\n1 0 1\n", 3),
    ("vertices 3 cells 1\n0 0 1\n1 0 1\n0 1 1\n0 1 7\n", 5),
    ("vertices 3 cells 1\n0 0 1\n1 x 1\n0 1 1\n0 1 2\n", 3),
    ("vertices 3 cells 1\n0 0 1\n1 0 1\n0 1 1\n0 0 2\n", 5),
])
def test_format_errors(text, line):
    with pytest.raises(MeshFormatError) as exc:
        load_mesh(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_comments_and_violations():
    text = "# an acute triangle\nvertices 3 cells 1\n0 0 2\n1 0 1\n0.4 0.9 1  # apex\n0 1 2\n"
    m = load_mesh(text)
    assert m.n_cells == 1
    assert validate_admissibility(m) == []
    # an obtuse triangle puts the circumcenter outside the cell
    m = Mesh(np.array([[0, 0], [2, 0], [1, 0.2]]), np.array([2, 1, 1]), np.array([[0, 1, 2]]))
    kinds = {v.kind for v in validate_admissibility(m)}
    assert "center_outside_cell" in kinds


def test_untagged_boundary():
    m = Mesh(np.array([[0, 0], [1, 0], [0.4, 0.9]]), np.array([0, 0, 0]), np.array([[0, 1, 2]]))
    assert {v.kind for v in validate_admissibility(m)} == {"untagged_boundary_edge"}
    # right angle: circumcenter sits on the hypotenuse
    m = Mesh(np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([1, 1, 1]), np.array([[0, 1, 2]]))
    assert "d_sigma_zero" in {v.kind for v in validate_admissibility(m)}


def test_degenerate_cell():
    with pytest.raises(MeshError):
        Mesh(np.array([[0, 0], [1, 0], [2, 0.0]]), np.array([1, 1, 1]), np.array([[0, 1, 2]]))


@pytest.mark.parametrize("n,sides", [(2, ("left", "right")), (5, ("left", "right")), (3, ())])
def test_vertex_weights_affine(n, sides):
    m = build_structured_mesh(n, dirichlet_sides=sides)
    w = vertex_interpolation_weights(m)
    free = ~w.dirichlet
    for f in (lambda p: np.ones(len(p)), lambda p: p[:, 0], lambda p: p[:, 1], lambda p: 2 - 3 * p[:, 0] + p[:, 1]):
        got = w.apply(f(m.centers))
        assert np.abs(got[free] - f(m.vertices)[free]).max() < 1e-12
    st_ = w.stencil(int(np.nonzero(free)[0][0]))
    assert sum(v for _, v in st_) == pytest.approx(1.0)


def test_degenerate_stencil():
    # a vertex touching two cells only cannot reproduce affine functions
    verts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]])
    cells = np.array([[0, 1, 4], [1, 2, 4]])
    m = Mesh(verts, np.array([1, 1, 1, 1, 1]), cells)
    with pytest.raises(MeshError):
        vertex_interpolation_weights(m)


def test_geometry_helpers():
    m = build_structured_mesh(2)
    bary = np.array([[1 / 3, 1 / 3, 1 / 3]])
    cen = m.map_points(bary)[:, 0]
    assert np.allclose(cen, m.vertices[m.cells].mean(axis=1))
    pts = m.edge_points(np.array([0.0, 0.5, 1.0]))
    assert np.allclose(pts[:, 1], m.edge_midpoints)
    b = m.edge_bary(np.array([0.25]), 0)
    assert np.allclose(np.einsum("epk,ekd->epd", b, m.vertices[m.cells[m.edge_cells[:, 0]]])[:, 0],
                       m.edge_points(np.array([0.25]))[:, 0])
    assert m.diameter == pytest.approx(np.sqrt(2))
    assert np.allclose(m.transmissibility, m.edge_lengths / m.d_sigma)
