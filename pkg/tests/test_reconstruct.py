import numpy as np
import pytest

from crossdiff.fvsolver import tpfa_fluxes
from crossdiff.mesh import build_structured_mesh, vertex_interpolation_weights
from crossdiff.reconstruct import (MorleyFunction, ReconstructionError, check_positive, discrete_A,
                                   reconstruct_potential_like, time_interpolant)

S, W = np.polynomial.legendre.leggauss(5)
S, W = (S + 1) / 2, W / 2


def edge_flux(w: MorleyFunction, side=0, weight: MorleyFunction | None = None):
    """int_sigma (weight) grad w . n, n out of edge_cells[:, side]."""
    m = w.mesh
    edges = np.nonzero(m.edge_cells[:, side] >= 0)[0]
    g = w.edge_normal_derivative(S, side, edges)
    if weight is not None:
        g = g * weight.edge_trace(S, side, edges)
    out = np.full(m.n_edges, np.nan)
    out[edges] = (g @ W) * m.edge_lengths[edges]
    return out


def test_vertex_and_flux_dofs(rec_general):
    traj = rec_general.traj
    m = traj.mesh
    for j, step in enumerate(rec_general.steps):
        st = traj[j]
        ed = step.edges
        # vertex dofs
        vw = rec_general.weights
        vv = vw.apply(st.u[0])
        free = ~vw.dirichlet
        q_vertex = np.zeros(m.n_vertices)
        q_vertex[m.cells.ravel()] = step.u0.q.ravel()
        assert np.abs(q_vertex[free] - vv[free]).max() <= 1e-10 * np.abs(vv).max()
        # flux dofs on every edge, both for the solvent, the potential and a weighted species
        target0 = -ed.flux[0] * ed.values.sum(axis=0)
        got = edge_flux(step.u0)
        scale = np.abs(target0).max()
        assert np.abs(got - target0).max() <= 1e-10 * scale
        got = edge_flux(step.phi)
        assert np.abs(got + ed.flux_phi).max() <= 1e-10 * np.abs(ed.flux_phi).max()
        for i, sp_ in enumerate(step.species, start=1):
            tgt = -ed.values[0] * ed.flux[i]
            got = edge_flux(sp_, weight=step.u0)
            assert np.abs(got - tgt).max() <= 1e-10 * np.abs(tgt).max()


def test_c0_traces(rec_general):
    m = rec_general.mesh
    ie = m.interior_edges
    s = np.linspace(0, 1, 7)
    step = rec_general.steps[-1]
    for w in [step.u0, step.phi, *step.species]:
        a = w.edge_trace(s, 0, ie)
        b = w.edge_trace(s, 1, ie)
        assert np.abs(a - b).max() <= 1e-12


def test_dirichlet_pins(rec_general):
    traj = rec_general.traj
    m = traj.mesh
    de = m.dirichlet_edges
    step = rec_general.steps[1]
    s = np.linspace(0, 1, 5)
    comp = m.edge_component[de]
    assert np.abs(step.u0.edge_trace(s, 0, de) - traj.boundary.values[comp, 0][:, None]).max() <= 1e-14
    assert np.abs(step.phi.edge_trace(s, 0, de) - traj.boundary.phi[comp][:, None]).max() <= 1e-14


def test_neumann_flux_zero(rec_reduced, rec_general):
    for rec in (rec_reduced, rec_general):
        ne = rec.mesh.neumann_edges
        for step in rec.steps:
            assert np.abs(edge_flux(step.u0)[ne]).max() <= 1e-11
            assert np.abs(edge_flux(step.phi)[ne]).max() <= 1e-11
            for sp_ in step.species:
                assert np.abs(edge_flux(sp_, weight=step.u0)[ne]).max() <= 1e-11


@pytest.mark.parametrize("g,grad", [
    (lambda x, y: 0.3 + 0 * x, (0.0, 0.0)),
    (lambda x, y: 0.2 + 0.5 * x - 0.25 * y, (0.5, -0.25)),
])
def test_affine_reproduction(g, grad):
    m = build_structured_mesh(4, dirichlet_sides=())
    w = vertex_interpolation_weights(m)
    c = m.centers
    vals = g(c[:, 0], c[:, 1])
    F = tpfa_fluxes(m, vals)
    # two-point fluxes are exact for affine fields on orthogonal meshes; Neumann edges get the exact flux
    ne = m.neumann_edges
    F[ne] = -m.edge_lengths[ne] * (m.edge_normals[ne] @ np.array(grad))
    rec = reconstruct_potential_like(m, vals, -F, w, np.zeros(0))
    ref = MorleyFunction.affine(m, g)
    assert np.abs(rec.q - ref.q).max() <= 1e-10
    assert np.abs(rec.p).max() <= 1e-10
    pts = np.random.default_rng(0).random((50, 2))
    assert np.abs(rec.evaluate(pts) - g(pts[:, 0], pts[:, 1])).max() <= 1e-10
    assert np.abs(rec.evaluate(pts, "gradient") - np.array(grad)).max() <= 1e-10


def test_morley_calculus():
    m = build_structured_mesh(2)
    rng = np.random.default_rng(4)
    w = MorleyFunction(m, rng.random((m.n_cells, 3)), rng.random((m.n_cells, 3)))
    bary = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
    cells = np.arange(m.n_cells)
    h = 1e-6
    pts = m.map_points(bary)
    val = w.value(bary)
    g = w.gradient(bary)
    lap = w.laplacian(bary)
    for k in range(len(bary)):
        P = pts[:, k]
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            fd = (w.evaluate(P + e) - w.evaluate(P - e)) / (2 * h)
            assert np.allclose(fd, g[:, k, d], atol=1e-6)
        ee = np.eye(2) * 1e-4
        lfd = sum((w.evaluate(P + e) - 2 * val[:, k] + w.evaluate(P - e)) / 1e-8 for e in ee)
        assert np.allclose(lfd, lap[:, k], rtol=1e-4, atol=1e-3)
    assert np.allclose(w.value(bary, cells), val)
    # linear structure
    two = w + w
    assert np.allclose((2 * w).value(bary), two.value(bary))
    assert np.allclose((w - w).value(bary), 0)
    with pytest.raises(ReconstructionError):
        w.evaluate(np.array([[2.0, 2.0]]))


def test_check_positive():
    m = build_structured_mesh(2)
    neg = MorleyFunction.affine(m, lambda x, y: x - 0.5)
    with pytest.raises(ReconstructionError):
        check_positive(neg)
    check_positive(MorleyFunction.affine(m, lambda x, y: 0.1 + x))


def test_time_interpolation(rec_reduced):
    rec = rec_reduced
    t0, t1 = rec.times[0], rec.times[1]
    tm = 0.25 * t0 + 0.75 * t1
    w, dw = time_interpolant(rec, tm)
    b = np.array([[0.2, 0.3, 0.5]])
    a0, a1 = rec.field(0, 0).value(b), rec.field(1, 0).value(b)
    assert np.allclose(w.value(b), 0.25 * a0 + 0.75 * a1)
    assert np.allclose(dw.value(b), (a1 - a0) / (t1 - t0))
    assert np.allclose(rec.at(t1).value(b), a1)
    with pytest.raises(ValueError):
        rec.at(rec.times[-1] + 1.0)


def test_discrete_A(rec_reduced):
    traj = rec_reduced.traj
    j = 2
    A = discrete_A(traj, j)
    tau = traj[j].t - traj[j - 1].t
    assert np.allclose(A, -(traj[j].u[0] - traj[j - 1].u[0]) / tau)
    # A^0 sums the weighted solvent fluxes per cell
    m = traj.mesh
    A0 = rec_reduced.A(0)
    assert A0.shape == (m.n_cells,)
    assert np.isfinite(A0).all()
