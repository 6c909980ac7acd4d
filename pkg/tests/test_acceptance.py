"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary). The benchmark studies run once per session; levels 0..5
of both manufactured cases take roughly a quarter of an hour on one core.
"""

import math
from math import factorial

import numpy as np
import pytest
from scipy.optimize import fsolve

from crossdiff.bench import StudyConfig, run_convergence_study
from crossdiff.estimators import ConstantsLedger, EvalGeometry, residual_triplet_general, residual_triplet_reduced, step_eval
from crossdiff.fvsolver import (BoundaryData, FVState, ModelParams, assemble_step_system, newton_advance,
                                project_initial, run_trajectory, solvent_rows, tpfa_flux, tpfa_fluxes)
from crossdiff.mesh import Mesh, build_structured_mesh, vertex_interpolation_weights
from crossdiff.quadrature import MAX_EDGE_DEGREE, MAX_TRIANGLE_DEGREE, get_rule
from crossdiff.reconstruct import MorleyFunction, reconstruct_potential_like, reconstruct_trajectory

from conftest import _species_init, small_trajectory

CRITERIA = {}


def record(n: int, title: str, checks):
    """``checks``: list of ``(label, ok, detail)``; prints and stores one line."""
    ok = all(c[1] for c in checks)
    failed = [f"{c[0]} ({c[2]})" for c in checks if not c[1]]
    detail = "; ".join(f"{c[0]} {c[2]}" for c in checks) if ok else "failed: " + "; ".join(failed)
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}: {detail}"
    CRITERIA[n] = line
    print(line)
    assert ok, line


def in_band(v, lo=0.85, hi=1.15):
    return lo <= v <= hi


# ------------------------------------------------------------ benchmark runs
@pytest.fixture(scope="session")
def reduced_study():
    return run_convergence_study(StudyConfig(case="reduced_s7", levels=(0, 5)))


@pytest.fixture(scope="session")
def general_study():
    return run_convergence_study(StudyConfig(case="general_s7", levels=(0, 5)))


def _sub_eocs(study, key, lo, hi):
    rows = [r for r in study.rows if lo <= r.level <= hi]
    la = np.array([r.log_totals[key] for r in rows])
    h = np.array([r.h for r in rows])
    return np.diff(la) / np.diff(np.log(h))


def test_criterion_1_reduced_rates(reduced_study):
    print("\n" + reduced_study.markdown())
    checks = []
    for key in ("eta2", "eta2_1", "eta_inf"):
        e = _sub_eocs(reduced_study, key, 2, 5)[-2:]
        checks.append((f"EOC {key}", all(in_band(v) for v in e), "/".join(f"{v:.3f}" for v in e)))
    record(1, "reduced rates in [0.85, 1.15] over the last two level pairs of 2..5", checks)


def test_criterion_2_effectivity_stability(reduced_study):
    rows = [r for r in reduced_study.rows if 2 <= r.level <= 5]
    ei0 = np.array([r.ei["EI0"] for r in rows])
    ei1 = np.array([r.ei["EI1"] for r in rows])
    f0, f1 = ei0.max() / ei0.min(), ei1.max() / ei1.min()
    record(2, "effectivity stability over levels 2..5", [
        ("EI0 ratio", f0 <= 3.0, f"{f0:.3f} <= 3 (EI0 {ei0.min():.3g}..{ei0.max():.3g})"),
        ("EI1 ratio", f1 <= 5.0, f"{f1:.3f} <= 5 (EI1 {ei1.min():.3g}..{ei1.max():.3g})"),
    ])


def test_criterion_3_general_rates(general_study):
    print("\n" + general_study.markdown())
    checks = []
    for key in ("eta2", "eta2_1", "eta_phi"):
        e = _sub_eocs(general_study, key, 3, 5)
        checks.append((f"EOC {key}", all(in_band(v) for v in e), "/".join(f"{v:.3f}" for v in e)))
    record(3, "general rates in [0.85, 1.15] over levels 3..5", checks)


def _reliability_pairs(row):
    """(label, true error, log of the matching estimator) for one level."""
    out = [("species 0", row.errors["0"], row.log_totals["eta2"])]
    i = 1
    while str(i) in row.errors:
        out.append((f"species {i}", row.errors[str(i)], row.log_totals[f"eta2_{i}"]))
        i += 1
    if "phi" in row.errors:
        out.append(("potential", row.errors["phi"], row.log_totals["eta_phi"]))
    if "inf0" in row.errors:
        out.append(("max-norm solvent", row.errors["inf0"], row.log_totals["eta_inf"]))
    return out


def test_criterion_4_reliability(reduced_study, general_study):
    checks = []
    for study in (reduced_study, general_study):
        worst, where = 0.0, ""
        for r in study.rows:
            for name, err, log_est in _reliability_pairs(r):
                ratio = math.exp(math.log(err) - log_est) if err > 0 else 0.0
                if ratio >= worst:
                    worst, where = ratio, f"{name}, level {r.level}"
        checks.append((study.case, worst < 1.0, f"max error/estimator {worst:.3g} ({where})"))
    record(4, "true error below the estimator at every level", checks)


# ------------------------------------------------------- scheme oracle
def _kite():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.8], [0.5, -0.8]])
    # edge (0,2) Dirichlet component 0, edge (1,3) component 1, the rest Neumann
    tags = np.array([2, 3, 2, 3])
    return Mesh(verts, tags, np.array([[0, 1, 2], [1, 0, 3]]))


def _oracle_residual(x, prev_u, verts, cells, bd_vals, bd_phi, comp_of_edge, params, tau, s, f):
    """Scheme written out edge by edge for a two-cell mesh (independent of the assembly)."""
    n = params.n
    X = x.reshape(2, n + 1)
    U = X[:, :n]
    phi = X[:, n]
    u0 = 1.0 - U.sum(axis=1)
    full = np.column_stack([u0, U])

    def lm(a, b):
        return a if a == b else (a - b) / (math.log(a) - math.log(b))

    def circ(P):
        (ax, ay), (bx, by), (cx, cy) = P
        d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
        uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
        return np.array([ux, uy])

    P = [verts[c] for c in cells]
    xc = [circ(p) for p in P]
    area = [0.5 * abs((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0])) for p in P]
    bz = params.beta * params.z
    res = np.zeros((2, n + 1))
    for K in range(2):
        for k in range(3):
            a, b = cells[K][(k + 1) % 3], cells[K][(k + 2) % 3]
            key = tuple(sorted((a, b)))
            length = np.linalg.norm(verts[a] - verts[b])
            mid = 0.5 * (verts[a] + verts[b])
            if key == (0, 1):  # shared edge
                L = 1 - K
                T = length / np.linalg.norm(xc[K] - xc[L])
                ue = [lm(full[K, i], full[L, i]) for i in range(n + 1)]
                other, ophi = full[L], phi[L]
            elif key in comp_of_edge:  # Dirichlet
                c = comp_of_edge[key]
                T = length / np.linalg.norm(xc[K] - mid)
                ue = list(bd_vals[c])
                other, ophi = bd_vals[c], bd_phi[c]
            else:
                continue  # Neumann: no flux
            for i in range(1, n + 1):
                res[K, i - 1] += T * (ue[0] * (full[K, i] - other[i]) - ue[i] * (full[K, 0] - other[0])
                                      + bz * ue[0] * ue[i] * (phi[K] - ophi))
            res[K, n] += params.lam**2 * T * (phi[K] - ophi)
        for i in range(n):
            res[K, i] += area[K] * ((U[K, i] - prev_u[K, i]) / tau - s[i])
        res[K, n] -= area[K] * (params.z * (1 - u0[K]) + f)
    return res.ravel()


def test_criterion_5_scheme_oracle():
    mesh = _kite()
    s = np.array([0.05, -0.02])
    f = 0.3
    params = ModelParams(n=2, z=1.0, beta=0.7, lam=0.9,
                         sources=lambda t, x, y: np.stack([s[0] + 0 * x, s[1] + 0 * x]),
                         permanent_charge=lambda t, x, y: f + 0 * x)
    bd = BoundaryData.from_species([[0.15, 0.25], [0.3, 0.1]], [0.2, -0.4])
    prev = FVState.from_species(0, 0.0, np.array([[0.2, 0.1], [0.2, 0.3]]), np.zeros(2))
    tau = 0.3
    state, _ = newton_advance(mesh, params, bd, prev, tau, tol=1e-13)
    comp = {(0, 2): 0, (1, 3): 1}
    cells = [list(c) for c in mesh.cells]
    prev_u = prev.u[1:].T

    def F(x):
        return _oracle_residual(x, prev_u, mesh.vertices, cells, bd.values, bd.phi, comp, params, tau, s, f)

    x0 = prev.unknowns()
    xo = fsolve(F, x0, xtol=1e-12)
    diff = np.abs(xo - state.unknowns()).max()
    resid = np.abs(F(xo)).max()
    record(5, "one implicit step on a two-cell mesh vs a dense nonlinear solve", [
        ("oracle converged", resid <= 1e-12, f"residual {resid:.1e}"),
        ("max unknown difference", diff <= 1e-9, f"{diff:.2e} <= 1e-9"),
    ])


# ---------------------------------------------------- structural invariants
def test_criterion_6_structural_invariants():
    checks = []
    traj = small_trajectory(1.0, n=4, steps=3, sources=lambda t, x, y: np.stack([0.1 * x * y, -0.05 * x + 0 * y]),
                            charge=lambda t, x, y: 0.2 * np.sin(3 * x) + 0 * y)
    m, p, bd = traj.mesh, traj.params, traj.boundary
    vf = max(np.abs(st.u.sum(axis=0) - 1.0).max() for st in traj.states)
    checks.append(("volume filling", vf <= 2.3e-16, f"max |sum u - 1| = {vf:.1e}"))

    rng = np.random.default_rng(0)
    w = rng.random(m.n_cells)
    anti = max(abs(tpfa_flux(m, w, e, m.edge_cells[e, 0]) + tpfa_flux(m, w, e, m.edge_cells[e, 1]))
               for e in m.interior_edges)
    checks.append(("flux conservativity", anti == 0.0, f"max |F_K + F_L| = {anti:.1e}"))

    mn = build_structured_mesh(4, dirichlet_sides=())
    pn = ModelParams(n=2, z=1.0, permanent_charge=lambda t, x, y: -0.4 + 0.3 * np.cos(np.pi * x) + 0 * y)
    bdn = BoundaryData.from_species([[0.1, 0.1]], [0.0])
    tn = run_trajectory(mn, pn, bdn, project_initial(mn, pn, bdn, _species_init), np.linspace(0, 0.5, 6))
    m0 = tn.states[0].u @ mn.areas
    drift = max(np.abs(st.u @ mn.areas - m0).max() for st in tn.states)
    checks.append(("mass conservation (pure Neumann)", drift <= 1e-10, f"max drift {drift:.1e}"))

    worst = 0.0
    for j in range(1, len(traj)):
        prev, cur = traj[j - 1], traj[j]
        tau = cur.t - prev.t
        x = cur.unknowns() * (1 + 1e-2 * rng.standard_normal(cur.unknowns().size))
        res, _ = assemble_step_system(m, p, bd, prev, x, tau, cur.t, jacobian=False)
        trial = FVState(j, cur.t, np.vstack([1 - x.reshape(m.n_cells, -1)[:, :2].sum(axis=1),
                                             x.reshape(m.n_cells, -1)[:, :2].T]), x.reshape(m.n_cells, -1)[:, 2])
        s0 = solvent_rows(m, p, bd, prev, trial, tau, cur.t)
        worst = max(worst, np.abs(s0 + res.reshape(m.n_cells, -1)[:, :2].sum(axis=1)).max())
    checks.append(("summed species rows", worst <= 1e-13, f"max mismatch {worst:.1e}"))

    prev, cur = traj[0], traj[1]
    tau = cur.t - prev.t
    x = cur.unknowns()
    _, J = assemble_step_system(m, p, bd, prev, x, tau, cur.t)
    J = J.toarray()
    fd = np.empty_like(J)
    h = 1e-7
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        rp, _ = assemble_step_system(m, p, bd, prev, x + e, tau, cur.t, jacobian=False)
        rm, _ = assemble_step_system(m, p, bd, prev, x - e, tau, cur.t, jacobian=False)
        fd[:, k] = (rp - rm) / (2 * h)
    rel = np.abs(J - fd).max() / np.abs(J).max()
    checks.append(("Jacobian vs finite differences", rel <= 1e-5, f"relative {rel:.1e}"))
    record(6, "structural invariants", checks)


# -------------------------------------------------------- reconstruction
def test_criterion_7_reconstruction():
    checks = []
    traj = small_trajectory(1.0, n=4, steps=2)
    rec = reconstruct_trajectory(traj)
    m = traj.mesh
    sq, wq = np.polynomial.legendre.leggauss(5)
    sq, wq = (sq + 1) / 2, wq / 2

    def flux_int(w, weight=None):
        g = w.edge_normal_derivative(sq, 0)
        if weight is not None:
            g = g * weight.edge_trace(sq, 0)
        return (g @ wq) * m.edge_lengths

    dof = 0.0
    c0 = 0.0
    neu = 0.0
    vw = rec.weights
    free = ~vw.dirichlet
    ie = m.interior_edges
    s7 = np.linspace(0, 1, 7)
    for j, step in enumerate(rec.steps):
        st, ed = traj[j], step.edges
        q_vertex = np.zeros(m.n_vertices)
        for fld, cellvals, tgt, weight in (
            (step.u0, st.u[0], -ed.flux[0] * ed.values.sum(axis=0), None),
            (step.phi, st.phi, -ed.flux_phi, None),
            *[(step.species[i - 1], st.u[i], -ed.values[0] * ed.flux[i], step.u0) for i in range(1, st.n + 1)],
        ):
            q_vertex[m.cells.ravel()] = fld.q.ravel()
            ref = vw.apply(cellvals)
            dof = max(dof, np.abs(q_vertex[free] - ref[free]).max() / np.abs(ref).max())
            got = flux_int(fld, weight)
            dof = max(dof, np.abs(got - tgt).max() / np.abs(tgt).max())
            c0 = max(c0, np.abs(fld.edge_trace(s7, 0, ie) - fld.edge_trace(s7, 1, ie)).max())
            neu = max(neu, np.abs(got[m.neumann_edges]).max())
    checks.append(("dof reproduction", dof <= 1e-10, f"relative {dof:.1e}"))
    checks.append(("C0 traces", c0 <= 1e-12, f"max trace jump {c0:.1e}"))

    aff = 0.0
    for sides in (("left", "right"), ()):
        mm = build_structured_mesh(5, dirichlet_sides=sides)
        w = vertex_interpolation_weights(mm)
        fr = ~w.dirichlet
        for g in (lambda x, y: 1 + 0 * x, lambda x, y: x, lambda x, y: y, lambda x, y: 0.3 - 2 * x + 0.7 * y):
            aff = max(aff, np.abs(w.apply(g(mm.centers[:, 0], mm.centers[:, 1]))[fr] - g(*mm.vertices.T)[fr]).max())
    mm = build_structured_mesh(4, dirichlet_sides=())
    w = vertex_interpolation_weights(mm)
    grad = np.array([0.5, -0.25])
    g = lambda x, y: 0.2 + grad[0] * x + grad[1] * y  # noqa: E731
    F = tpfa_fluxes(mm, g(*mm.centers.T))
    F[mm.neumann_edges] = -mm.edge_lengths[mm.neumann_edges] * (mm.edge_normals[mm.neumann_edges] @ grad)
    r = reconstruct_potential_like(mm, g(*mm.centers.T), -F, w, np.zeros(0))
    ref = MorleyFunction.affine(mm, g)
    aff = max(aff, np.abs(r.q - ref.q).max(), np.abs(r.p).max())
    checks.append(("affine reproduction", aff <= 1e-10, f"max error {aff:.1e}"))
    checks.append(("Neumann flux dofs", neu <= 1e-11, f"max |flux| {neu:.1e}"))
    record(7, "reconstruction suite", checks)


# ------------------------------------------------------------- quadrature
def test_criterion_8_quadrature():
    worst_t = 0.0
    for deg in range(0, MAX_TRIANGLE_DEGREE + 1):
        r = get_rule("triangle", deg)
        x, y = r.points[:, 1], r.points[:, 2]
        for a in range(deg + 1):
            for b in range(deg + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                worst_t = max(worst_t, abs(r.weights @ (x**a * y**b) - exact) / exact)
    worst_e = 0.0
    for deg in range(0, MAX_EDGE_DEGREE + 1):
        r = get_rule("edge", deg)
        for k in range(deg + 1):
            worst_e = max(worst_e, abs(r.weights @ r.points**k - 1 / (k + 1)) * (k + 1))
    record(8, "quadrature exactness", [
        (f"triangle degrees 0..{MAX_TRIANGLE_DEGREE}", worst_t <= 1e-12, f"max relative error {worst_t:.1e}"),
        (f"edge degrees 0..{MAX_EDGE_DEGREE}", worst_e <= 1e-12, f"max relative error {worst_e:.1e}"),
    ])


# ------------------------------------------------------------ degeneration
def test_criterion_9_degeneration_and_ledger():
    checks = []
    traj = small_trajectory(0.0, n=4, steps=3, sources=lambda t, x, y: np.stack([0.1 * x + 0 * y, -0.05 * y + 0 * x]))
    rec = reconstruct_trajectory(traj)
    geo = EvalGeometry(traj.mesh)
    L = ConstantsLedger().resolve(traj.mesh)
    worst = 0.0
    for j in range(1, rec.J + 1):
        a, b = step_eval(geo, rec, j - 1, False, True), step_eval(geo, rec, j, False, True)
        tau = rec.times[j] - rec.times[j - 1]
        s_m = np.random.default_rng(j).random((2, traj.mesh.n_cells))
        for i in (1, 2):
            r = np.array(residual_triplet_reduced(geo, i, a, b, tau, L, s_m[i - 1]))
            g = np.array(residual_triplet_general(geo, i, a, b, tau, L, 0.0, 1.0, 1.0, s_m))
            worst = max(worst, np.abs(r - g).max() / max(1.0, np.abs(r).max()))
    checks.append(("z = 0 triplets", worst <= 1e-13, f"max relative difference {worst:.1e}"))
    d = ConstantsLedger()
    p = 1 / (0.5 - 1 / d.q)
    th = 2 / 2 - 2 / p
    mu = (1 - th) / 2 * (1 / (2 * (1 + th))) ** ((th + 1) / (th - 1))
    err = max(abs(d.theta - th), abs(d.mu - mu))
    checks.append(("theta, mu from q", err <= 1e-14, f"theta {d.theta:.6f}, mu {d.mu:.6f}, diff {err:.1e}"))
    checks.append(("C_G <= C_S^theta", d.C_G <= d.C_S**d.theta, f"{d.C_G} <= {d.C_S ** d.theta:.6f}"))
    checks.append(("default bounds", d.mu <= 1.08 and d.C_G <= 1.02 and d.C_S <= 12.02,
                   f"mu {d.mu:.4f} <= 1.08, C_G {d.C_G} <= 1.02, C_S {d.C_S} <= 12.02"))
    record(9, "estimator degeneration and constants ledger", checks)
