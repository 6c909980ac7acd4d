"""Conforming P1 + bubble reconstruction of finite volume solutions.

On each cell a reconstructed function is ``w = q + p b`` with ``q, p`` affine
and ``b = 27 l0 l1 l2`` the cubic bubble. ``q`` is fixed by interpolated
vertex values, ``p`` by the (optionally weighted) normal-flux integral on
each edge. Since ``b`` vanishes on the boundary of the cell, traces only
depend on vertex values and the global function is continuous.

Flux targets follow the outward-flux convention of :mod:`fvsolver`: the
reconstructed normal derivative integrates to ``-F`` on each edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fvsolver import BoundaryData, FVState, Trajectory, edge_values, source_means, tpfa_fluxes
from .mesh import Mesh, VertexWeights, vertex_interpolation_weights
from .quadrature import lattice_points

_LOCAL = np.array([[1, 2], [2, 0], [0, 1]])  # vertices of local edge k


class ReconstructionError(ValueError):
    pass


def _broadcast_bary(mesh: Mesh, bary, cells):
    bary = np.asarray(bary, dtype=float)
    if cells is None:
        cells = np.arange(mesh.n_cells)
    if bary.ndim == 2:
        bary = np.broadcast_to(bary, (len(cells),) + bary.shape)
    return bary, np.asarray(cells)


class MorleyFunction:
    """Piecewise ``q + p b`` function; ``q`` and ``p`` are (ncells, 3) vertex-basis coefficients."""

    def __init__(self, mesh: Mesh, q: np.ndarray, p: np.ndarray):
        self.mesh = mesh
        self.q = np.asarray(q, dtype=float)
        self.p = np.asarray(p, dtype=float)

    # arithmetic on coefficient arrays (the space is linear)
    def __add__(self, other):
        return MorleyFunction(self.mesh, self.q + other.q, self.p + other.p)

    def __sub__(self, other):
        return MorleyFunction(self.mesh, self.q - other.q, self.p - other.p)

    def __mul__(self, c):
        return MorleyFunction(self.mesh, c * self.q, c * self.p)

    __rmul__ = __mul__

    @classmethod
    def zero(cls, mesh):
        return cls(mesh, np.zeros((mesh.n_cells, 3)), np.zeros((mesh.n_cells, 3)))

    @classmethod
    def affine(cls, mesh, g):
        """Interpolate an affine ``g(x, y)``; exact, with zero bubble part."""
        v = mesh.vertices[mesh.cells]
        return cls(mesh, g(v[..., 0], v[..., 1]), np.zeros((mesh.n_cells, 3)))

    # --------------------------------------------------------- evaluation
    def value(self, bary, cells=None) -> np.ndarray:
        """Values at barycentric points; (m, npts)."""
        lam, cells = _broadcast_bary(self.mesh, bary, cells)
        q = np.einsum("cpk,ck->cp", lam, self.q[cells])
        p = np.einsum("cpk,ck->cp", lam, self.p[cells])
        return q + 27.0 * p * lam.prod(axis=2)

    def gradient(self, bary, cells=None) -> np.ndarray:
        """Gradients at barycentric points; (m, npts, 2)."""
        lam, cells = _broadcast_bary(self.mesh, bary, cells)
        G = self.mesh.barycentric_gradients[cells]
        gq = np.einsum("ck,ckd->cd", self.q[cells], G)[:, None, :]
        gp = np.einsum("ck,ckd->cd", self.p[cells], G)[:, None, :]
        pv = np.einsum("cpk,ck->cp", lam, self.p[cells])
        gb = self._bubble_grad(lam, G)
        b = 27.0 * lam.prod(axis=2)
        return gq + gp * b[..., None] + pv[..., None] * gb

    @staticmethod
    def _bubble_grad(lam, G):
        l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
        return 27.0 * ((l1 * l2)[..., None] * G[:, None, 0] + (l0 * l2)[..., None] * G[:, None, 1]
                       + (l0 * l1)[..., None] * G[:, None, 2])

    def laplacian(self, bary, cells=None) -> np.ndarray:
        lam, cells = _broadcast_bary(self.mesh, bary, cells)
        G = self.mesh.barycentric_gradients[cells]
        gp = np.einsum("ck,ckd->cd", self.p[cells], G)[:, None, :]
        pv = np.einsum("cpk,ck->cp", lam, self.p[cells])
        gb = self._bubble_grad(lam, G)
        g01 = np.sum(G[:, 0] * G[:, 1], axis=1)[:, None]
        g02 = np.sum(G[:, 0] * G[:, 2], axis=1)[:, None]
        g12 = np.sum(G[:, 1] * G[:, 2], axis=1)[:, None]
        lb = 54.0 * (lam[..., 2] * g01 + lam[..., 1] * g02 + lam[..., 0] * g12)
        return 2.0 * np.sum(gp * gb, axis=2) + pv * lb

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and barycentric coordinates of physical points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        mesh = self.mesh
        v0 = mesh.vertices[mesh.cells[:, 0]]
        G = mesh.barycentric_gradients
        rel = pts[:, None, :] - v0[None, :, :]
        l12 = np.einsum("mcd,ckd->mck", rel, G[:, 1:])
        lam = np.concatenate([1.0 - l12.sum(axis=2, keepdims=True), l12], axis=2)
        score = lam.min(axis=2)
        cells = score.argmax(axis=1)
        if np.any(score[np.arange(len(pts)), cells] < -1e-10):
            bad = int(np.argmin(score.max(axis=1)))
            raise ReconstructionError(f"point {pts[bad].tolist()} lies outside the mesh")
        return cells, lam[np.arange(len(pts)), cells]

    def evaluate(self, points, what: str = "value"):
        """Evaluate at physical points: ``value``, ``gradient`` or ``laplacian``."""
        cells, lam = self.locate(points)
        fn = {"value": self.value, "gradient": self.gradient, "laplacian": self.laplacian}[what]
        return fn(lam[:, None, :], cells)[:, 0]

    # ---------------------------------------------------------- edge dofs
    def edge_trace(self, s, side: int = 0, edges=None) -> np.ndarray:
        mesh = self.mesh
        edges = np.arange(mesh.n_edges) if edges is None else np.asarray(edges)
        return self.value(mesh.edge_bary(s, side, edges), mesh.edge_cells[edges, side])

    def edge_normal_derivative(self, s, side: int = 0, edges=None) -> np.ndarray:
        """``grad w . n`` with ``n`` pointing out of the cell on ``side``."""
        mesh = self.mesh
        edges = np.arange(mesh.n_edges) if edges is None else np.asarray(edges)
        g = self.gradient(mesh.edge_bary(s, side, edges), mesh.edge_cells[edges, side])
        sign = 1.0 if side == 0 else -1.0
        return sign * np.einsum("epd,ed->ep", g, mesh.edge_normals[edges])

    def vertex_values(self) -> np.ndarray:
        return self.q


# --------------------------------------------------------------- local solve
def _vertex_values(mesh: Mesh, weights: VertexWeights, cell_values, pins) -> np.ndarray:
    vals = np.asarray(weights.apply(cell_values), dtype=float)
    dmask = weights.dirichlet
    comps = mesh.vertex_tags[dmask] - 2
    vals[dmask] = np.asarray(pins)[comps]
    return vals


def _solve_local(mesh: Mesh, vertex_vals: np.ndarray, targets: np.ndarray, weight: np.ndarray | None):
    """Solve for bubble coefficients cellwise.

    ``targets`` (ncells, 3): prescribed flux integral on local edge ``k``;
    ``weight`` (ncells, 3) vertex values of an affine edge weight or None.
    """
    nc = mesh.n_cells
    q = vertex_vals[mesh.cells]
    G = mesh.barycentric_gradients
    normals = mesh.cell_normals()
    lengths = mesh.edge_lengths[mesh.cell_edges]
    U = np.ones((nc, 3)) if weight is None else weight
    gq = np.einsum("ck,ckd->cd", q, G)
    M = np.zeros((nc, 3, 3))
    rhs = np.empty((nc, 3))
    for k in range(3):
        i, j = _LOCAL[k]
        ck = 27.0 * np.sum(G[:, k] * normals[:, k], axis=1) * lengths[:, k]
        Ui, Uj = U[:, i], U[:, j]
        M[:, k, i] = ck * (Ui / 20.0 + Uj / 30.0)
        M[:, k, j] = ck * (Uj / 20.0 + Ui / 30.0)
        qflux = np.sum(gq * normals[:, k], axis=1) * lengths[:, k] * 0.5 * (Ui + Uj)
        rhs[:, k] = targets[:, k] - qflux
    try:
        p = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ReconstructionError("singular local reconstruction system") from exc
    return MorleyFunction(mesh, q, p)


def cell_targets(mesh: Mesh, per_edge: np.ndarray) -> np.ndarray:
    """(ncells, 3) view of an edge quantity oriented from ``edge_cells[:, 0]``."""
    return per_edge[mesh.cell_edges] * mesh.cell_edge_sign


def reconstruct_potential_like(mesh: Mesh, cell_values, edge_targets, weights: VertexWeights, pins) -> MorleyFunction:
    """Reconstruction from vertex interpolation and normal-flux integrals.

    ``edge_targets`` holds ``int_s grad w . n`` per edge, with ``n`` pointing
    out of ``edge_cells[:, 0]``; ``pins`` gives the value per Dirichlet component.
    """
    vv = _vertex_values(mesh, weights, cell_values, pins)
    return _solve_local(mesh, vv, cell_targets(mesh, edge_targets), None)


def check_positive(w: MorleyFunction, what: str = "solvent reconstruction"):
    vals = w.value(lattice_points(4))
    mins = vals.min(axis=1)
    bad = np.nonzero(mins <= 0)[0]
    if len(bad):
        raise ReconstructionError(f"{what} is not positive on cell {int(bad[0])} (min {mins[bad[0]]:.3e})")


def reconstruct_species(mesh: Mesh, u0_hat: MorleyFunction, cell_values, edge_targets, weights: VertexWeights,
                        pins) -> MorleyFunction:
    """Species reconstruction with ``u0_hat``-weighted flux integrals."""
    check_positive(u0_hat)
    vv = _vertex_values(mesh, weights, cell_values, pins)
    return _solve_local(mesh, vv, cell_targets(mesh, edge_targets), u0_hat.q)


# ---------------------------------------------------- targets from a state
@dataclass
class EdgeData:
    """Edge values and outflow fluxes of one finite volume state."""

    values: np.ndarray  # (n+1, nedges) u_{i,sigma}
    flux: np.ndarray  # (n+1, nedges) F(u_i)
    flux_phi: np.ndarray  # (nedges,)


def edge_data(mesh: Mesh, state: FVState, boundary: BoundaryData) -> EdgeData:
    de = mesh.dirichlet_edges
    vD = boundary.edge_values(mesh, de)
    ev = edge_values(mesh, state.u, boundary)
    F = np.stack([tpfa_fluxes(mesh, state.u[i], vD[i]) for i in range(state.u.shape[0])])
    Fp = tpfa_fluxes(mesh, state.phi, boundary.edge_phi(mesh, de))
    return EdgeData(ev, F, Fp)


@dataclass
class StepReconstruction:
    u0: MorleyFunction
    species: list
    phi: MorleyFunction
    edges: EdgeData


def reconstruct_state(mesh: Mesh, state: FVState, boundary: BoundaryData, weights: VertexWeights) -> StepReconstruction:
    ed = edge_data(mesh, state, boundary)
    n = state.n
    total = ed.values.sum(axis=0)
    u0 = reconstruct_potential_like(mesh, state.u[0], -ed.flux[0] * total, weights, boundary.values[:, 0])
    phi = reconstruct_potential_like(mesh, state.phi, -ed.flux_phi, weights, boundary.phi)
    check_positive(u0)
    species = [
        reconstruct_species(mesh, u0, state.u[i], -ed.values[0] * ed.flux[i], weights, boundary.values[:, i])
        for i in range(1, n + 1)
    ]
    return StepReconstruction(u0, species, phi, ed)


# ------------------------------------------------------------------ time
def discrete_A(traj: Trajectory, j: int, edges: EdgeData | None = None) -> np.ndarray:
    """Cellwise constant ``A^j``.

    ``j = 0``: minus the discrete Laplacian ``(1/|K|) sum_s (u_0s + sum_i u_is) F(u_0)``;
    ``j > 0``: ``-(u_0^j - u_0^{j-1}) / tau_j`` plus the solvent source mean when present.
    """
    mesh = traj.mesh
    if j == 0:
        ed = edges or edge_data(mesh, traj[0], traj.boundary)
        per_edge = ed.flux[0] * ed.values.sum(axis=0)
        return np.sum(cell_targets(mesh, per_edge), axis=1) / mesh.areas
    tau = traj[j].t - traj[j - 1].t
    A = -(traj[j].u[0] - traj[j - 1].u[0]) / tau
    s, _ = source_means(mesh, traj.params, traj[j].t)
    if s is not None:
        A = A - s.sum(axis=0)
    return A


class SpaceTimeReconstruction:
    """Per-step reconstructions, linear in time between steps."""

    def __init__(self, traj: Trajectory, steps: list, weights: VertexWeights):
        self.traj = traj
        self.mesh = traj.mesh
        self.steps = steps
        self.weights = weights
        self.times = traj.times
        self._A = [discrete_A(traj, j, s.edges if j == 0 else None) for j, s in enumerate(steps)]

    @property
    def J(self) -> int:
        return len(self.steps) - 1

    @property
    def n(self) -> int:
        return len(self.steps[0].species)

    def A(self, j: int) -> np.ndarray:
        return self._A[j]

    def field(self, j: int, which):
        """``which``: 0 for the solvent, 1..n species, ``"phi"`` for the potential."""
        s = self.steps[j]
        if which == "phi":
            return s.phi
        return s.u0 if which == 0 else s.species[which - 1]

    def interval(self, t: float) -> int:
        if t < self.times[0] - 1e-14 or t > self.times[-1] + 1e-14:
            raise ValueError(f"t = {t} outside [{self.times[0]}, {self.times[-1]}]")
        j = int(np.searchsorted(self.times, t, side="left"))
        return min(max(j, 1), self.J)

    def weights_at(self, t: float):
        j = self.interval(t)
        tau = self.times[j] - self.times[j - 1]
        lj = (t - self.times[j - 1]) / tau
        return j, 1.0 - lj, lj

    def at(self, t: float, which=0) -> MorleyFunction:
        if self.J == 0:
            return self.field(0, which)
        j, lm, lj = self.weights_at(t)
        return lm * self.field(j - 1, which) + lj * self.field(j, which)

    def time_derivative(self, t: float, which=0) -> MorleyFunction:
        j = self.interval(t)
        tau = self.times[j] - self.times[j - 1]
        return (self.field(j, which) - self.field(j - 1, which)) * (1.0 / tau)


def time_interpolant(rec: SpaceTimeReconstruction, t: float, which=0):
    """Spatial function at ``t`` and its (piecewise constant) time derivative."""
    return rec.at(t, which), rec.time_derivative(t, which)


def reconstruct_trajectory(traj: Trajectory, weights: VertexWeights | None = None) -> SpaceTimeReconstruction:
    weights = weights or vertex_interpolation_weights(traj.mesh)
    steps = [reconstruct_state(traj.mesh, s, traj.boundary, weights) for s in traj.states]
    return SpaceTimeReconstruction(traj, steps, weights)
