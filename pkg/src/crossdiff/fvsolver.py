"""Implicit two-point flux finite volume scheme for the ion-transport system.

Unknowns per cell are the species concentrations ``u_1..u_n`` and the
potential ``phi``; the solvent ``u_0 = 1 - sum_i u_i`` is eliminated
algebraically. ``F`` below always denotes the outflow two-point flux
``(|s|/d_s)(w_K - w_L)``, so the discrete species balance reads

    |K| (u_i - u_i_old) / tau
        + sum_s [u_0s F(u_i) - u_is F(u_0) + u_0s u_is beta z F(phi)]
        - |K| mean_K s_i = 0

which is the backward Euler discretisation of
``d_t v_i = div(v_0 grad v_i - v_i grad v_0 + v_0 v_i beta z grad psi)``,
and the potential row is ``lambda^2 sum_s F(phi) - |K| (z (1 - u_0K) + mean_K f) = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DIRICHLET, NEUMANN, Mesh
from .quadrature import DEFAULT_TRIANGLE_DEGREE, cell_integrals, get_rule

log = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-3  # relative gap below which the log-mean uses its series

# series of g(r) = r / log(1 + r) and g'(r) about r = 0
_G = [1.0, 1 / 2, -1 / 12, 1 / 24, -19 / 720, 3 / 160, -863 / 60480, 275 / 24192]
_DG = [k * c for k, c in enumerate(_G)][1:]


class SolverError(RuntimeError):
    pass


class PositivityError(SolverError):
    pass


# ------------------------------------------------------------------ log-mean
def _log_mean_parts(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("log_mean requires positive arguments")
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    r = (hi - lo) / lo
    small = r < SERIES_THRESHOLD
    g = np.empty_like(r)
    dg = np.empty_like(r)
    rs = r[small]
    g[small] = np.polynomial.polynomial.polyval(rs, _G)
    dg[small] = np.polynomial.polynomial.polyval(rs, _DG)
    rb = r[~small]
    lg = np.log1p(rb)
    g[~small] = rb / lg
    dg[~small] = (lg - rb / (1.0 + rb)) / lg**2
    return a, b, lo, r, g, dg


def log_mean(a, b):
    """Logarithmic mean ``(a - b) / (ln a - ln b)``, symmetric and stable for a ~ b."""
    a_, b_, lo, r, g, _ = _log_mean_parts(a, b)
    out = lo * g
    return float(out) if out.ndim == 0 else out


def log_mean_grad(a, b):
    """Value and partial derivatives ``(L, dL/da, dL/db)`` of the log-mean."""
    a, b, lo, r, g, dg = _log_mean_parts(a, b)
    d_hi = dg
    d_lo = g - (1.0 + r) * dg
    a_is_hi = a >= b
    da = np.where(a_is_hi, d_hi, d_lo)
    db = np.where(a_is_hi, d_lo, d_hi)
    return lo * g, da, db


# ------------------------------------------------------------- data objects
@dataclass(frozen=True)
class ModelParams:
    """Model coefficients. ``sources(t, x, y)`` returns an (n, ...) array and
    ``permanent_charge(t, x, y)`` an array shaped like ``x``."""

    n: int
    z: float = 0.0
    beta: float = 1.0
    lam: float = 1.0
    permanent_charge: Optional[Callable] = None
    sources: Optional[Callable] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one species")
        if self.lam <= 0 or self.beta <= 0:
            raise ValueError("lambda and beta must be positive")


@dataclass(frozen=True)
class BoundaryData:
    """Constant Dirichlet data per boundary component.

    ``values[c, i]`` is the concentration of species ``i`` (0 = solvent) on
    component ``c``; ``phi[c]`` the potential there.
    """

    values: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if len(phi) != len(vals):
            raise ValueError("one potential value per Dirichlet component required")
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError("boundary concentrations must lie in [0, 1]")
        if np.any(np.abs(vals.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("boundary concentrations must sum to one on each component")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_species(cls, species, phi):
        """Build from species values ``u_1..u_n`` per component; the solvent is filled in."""
        sp_ = np.atleast_2d(np.asarray(species, dtype=float))
        return cls(np.column_stack([1.0 - sp_.sum(axis=1), sp_]), phi)

    @property
    def n_components(self) -> int:
        return len(self.values)

    def edge_values(self, mesh: Mesh, edges: np.ndarray) -> np.ndarray:
        """(n+1, len(edges)) Dirichlet values on the given Dirichlet edges."""
        return self.values[mesh.edge_component[edges]].T

    def edge_phi(self, mesh: Mesh, edges: np.ndarray) -> np.ndarray:
        return self.phi[mesh.edge_component[edges]]


@dataclass
class FVState:
    """Cell values at one time level; ``u[0]`` is the solvent."""

    j: int
    t: float
    u: np.ndarray  # (n+1, ncells)
    phi: np.ndarray  # (ncells,)

    @classmethod
    def from_species(cls, j, t, species, phi):
        species = np.atleast_2d(np.asarray(species, dtype=float))
        u = np.vstack([1.0 - species.sum(axis=0), species])
        return cls(j, float(t), u, np.asarray(phi, dtype=float).copy())

    @property
    def n(self) -> int:
        return self.u.shape[0] - 1

    def unknowns(self) -> np.ndarray:
        n = self.n
        x = np.empty((self.u.shape[1], n + 1))
        x[:, :n] = self.u[1:].T
        x[:, n] = self.phi
        return x.ravel()


@dataclass
class Trajectory:
    mesh: Mesh
    params: ModelParams
    boundary: BoundaryData
    states: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def taus(self) -> np.ndarray:
        """Step sizes ``tau_j = t_j - t_{j-1}`` for ``j = 1..J`` (index ``j - 1``)."""
        return np.diff(self.times)

    @property
    def J(self) -> int:
        return len(self.states) - 1

    def __len__(self):
        return len(self.states)

    def __getitem__(self, j) -> FVState:
        return self.states[j]


# ------------------------------------------------------------ edge quantities
def edge_value(mesh: Mesh, state: FVState, i: int, edge: int, boundary: BoundaryData) -> float:
    """``u_{i,sigma}``: Neumann copy, Dirichlet constant, interior log-mean."""
    kind = mesh.edge_kind[edge]
    K, L = mesh.edge_cells[edge]
    if kind == NEUMANN:
        return float(state.u[i, K])
    if kind == DIRICHLET:
        return float(boundary.values[mesh.edge_component[edge], i])
    return log_mean(state.u[i, K], state.u[i, L])


def edge_values(mesh: Mesh, u: np.ndarray, boundary: BoundaryData) -> np.ndarray:
    """Vectorised ``u_{i,sigma}`` for all species rows of ``u`` and all edges."""
    u = np.atleast_2d(u)
    out = np.empty((u.shape[0], mesh.n_edges))
    ie, ne, de = mesh.interior_edges, mesh.neumann_edges, mesh.dirichlet_edges
    K, L = mesh.edge_cells[ie, 0], mesh.edge_cells[ie, 1]
    out[:, ie] = log_mean(u[:, K], u[:, L])
    out[:, ne] = u[:, mesh.edge_cells[ne, 0]]
    out[:, de] = boundary.values[mesh.edge_component[de]].T[: u.shape[0]]
    return out


def tpfa_flux(mesh: Mesh, w: np.ndarray, edge: int, cell: int, boundary_value: float = 0.0) -> float:
    """Outflow two-point flux ``F_sigma^K(w)`` seen from ``cell``."""
    K, L = mesh.edge_cells[edge]
    if cell not in (K, L) or cell < 0:
        raise ValueError(f"cell {cell} is not adjacent to edge {edge}")
    kind = mesh.edge_kind[edge]
    T = mesh.transmissibility[edge]
    if kind == NEUMANN:
        return 0.0
    if kind == DIRICHLET:
        return float(T * (w[K] - boundary_value))
    other = L if cell == K else K
    return float(T * (w[cell] - w[other]))


def tpfa_fluxes(mesh: Mesh, w: np.ndarray, dirichlet_values=None) -> np.ndarray:
    """Per-edge flux seen from ``edge_cells[:, 0]``; the second cell sees the negative.

    ``dirichlet_values`` is an array over ``mesh.dirichlet_edges``.
    """
    F = np.zeros(mesh.n_edges)
    ie, de = mesh.interior_edges, mesh.dirichlet_edges
    T = mesh.transmissibility
    F[ie] = T[ie] * (w[mesh.edge_cells[ie, 0]] - w[mesh.edge_cells[ie, 1]])
    wd = 0.0 if dirichlet_values is None else dirichlet_values
    F[de] = T[de] * (w[mesh.edge_cells[de, 0]] - wd)
    return F


def cell_flux_sum(mesh: Mesh, per_edge: np.ndarray) -> np.ndarray:
    """Sum over each cell's edges of a quantity oriented from ``edge_cells[:, 0]``."""
    return np.sum(per_edge[mesh.cell_edges] * mesh.cell_edge_sign, axis=1)


# --------------------------------------------------------------- cell means
def cell_means(mesh: Mesh, func, degree: int = DEFAULT_TRIANGLE_DEGREE) -> np.ndarray:
    """Cell means of ``func(x, y)``; a leading axis of the result is kept."""
    rule = get_rule("triangle", degree)
    pts = mesh.map_points(rule.points)
    vals = np.asarray(func(pts[..., 0], pts[..., 1]), dtype=float)
    if vals.ndim == 2:
        return cell_integrals(vals, mesh.areas, rule) / mesh.areas
    return np.stack([cell_integrals(v, mesh.areas, rule) for v in vals]) / mesh.areas


def source_means(mesh: Mesh, params: ModelParams, t: float):
    s = None
    f = None
    if params.sources is not None:
        s = np.atleast_2d(cell_means(mesh, lambda x, y: params.sources(t, x, y)))
    if params.permanent_charge is not None:
        f = cell_means(mesh, lambda x, y: params.permanent_charge(t, x, y))
    return s, f


# ----------------------------------------------------------------- Poisson
def _poisson_matrix(mesh: Mesh, lam: float):
    ie, de = mesh.interior_edges, mesh.dirichlet_edges
    T = mesh.transmissibility
    K, L = mesh.edge_cells[ie, 0], mesh.edge_cells[ie, 1]
    Kd = mesh.edge_cells[de, 0]
    rows = np.concatenate([K, L, K, L, Kd])
    cols = np.concatenate([K, L, L, K, Kd])
    vals = lam**2 * np.concatenate([T[ie], T[ie], -T[ie], -T[ie], T[de]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_cells))


def solve_potential(mesh: Mesh, params: ModelParams, boundary: BoundaryData, u0: np.ndarray, t: float = 0.0):
    """Solve the potential row for given solvent values."""
    A = _poisson_matrix(mesh, params.lam).tolil()
    de = mesh.dirichlet_edges
    rhs = mesh.areas * params.z * (1.0 - u0)
    _, f = source_means(mesh, params, t)
    if f is not None:
        rhs = rhs + mesh.areas * f
    np.add.at(rhs, mesh.edge_cells[de, 0], params.lam**2 * mesh.transmissibility[de] * boundary.edge_phi(mesh, de))
    if len(de) == 0:
        # pure Neumann: fix the additive constant at cell 0
        A[0, :] = 0.0
        A[0, 0] = 1.0
        rhs[0] = 0.0
    return spla.spsolve(A.tocsc(), rhs)


def project_initial(mesh: Mesh, params: ModelParams, boundary: BoundaryData, initial, t0: float = 0.0,
                    mode: str = "mean") -> FVState:
    """Initial species values and the matching potential.

    ``initial(x, y)`` returns an (n, ...) array of species concentrations.
    ``mode="mean"`` takes cell means; ``mode="point"`` samples at the
    collocation points, which is consistent with the two-point fluxes.
    """
    if mode == "mean":
        means = np.atleast_2d(cell_means(mesh, initial))
    elif mode == "point":
        c = mesh.centers
        means = np.atleast_2d(np.asarray(initial(c[:, 0], c[:, 1]), dtype=float))
    else:
        raise ValueError(f"unknown initial projection {mode!r}")
    if means.shape[0] != params.n:
        raise ValueError(f"initial data has {means.shape[0]} species, expected {params.n}")
    u0 = 1.0 - means.sum(axis=0)
    if np.any(means <= 0) or np.any(u0 <= 0):
        bad = int(np.argmin(np.minimum(means.min(axis=0), u0)))
        raise PositivityError(f"initial cell mean not positive in cell {bad}")
    phi = solve_potential(mesh, params, boundary, u0, t0)
    return FVState(0, t0, np.vstack([u0, means]), phi)


# -------------------------------------------------------------- assembly
def _split(x: np.ndarray, n: int):
    X = x.reshape(-1, n + 1)
    return X[:, :n].T, X[:, n]


def assemble_step_system(mesh: Mesh, params: ModelParams, boundary: BoundaryData, prev: FVState, x: np.ndarray,
                         tau: float, t: float, sources=None, jacobian: bool = True):
    """Residual and sparse Jacobian of one implicit step at unknowns ``x``.

    ``sources`` may carry precomputed ``(s_means, f_means)`` at time ``t``.
    """
    n = params.n
    nc = mesh.n_cells
    N = n + 1
    U, phi = _split(np.asarray(x, dtype=float), n)
    u0 = 1.0 - U.sum(axis=0)
    if np.any(U <= 0) or np.any(u0 <= 0):
        raise PositivityError("trial state has non-positive concentrations")
    s_means, f_means = source_means(mesh, params, t) if sources is None else sources
    bz = params.beta * params.z
    lam2 = params.lam**2
    T = mesh.transmissibility
    ie, de = mesh.interior_edges, mesh.dirichlet_edges
    K, L = mesh.edge_cells[ie, 0], mesh.edge_cells[ie, 1]
    Kd = mesh.edge_cells[de, 0]
    Ti, Td = T[ie], T[de]
    area = mesh.areas

    R = np.zeros((nc, N))
    rows, cols, vals = [], [], []

    def add(r_cell, r_k, c_cell, c_k, v):
        rows.append(r_cell * N + r_k)
        cols.append(c_cell * N + c_k)
        vals.append(v)

    a, b = u0[K], u0[L]
    m0, m0a, m0b = log_mean_grad(a, b)
    dphi = phi[K] - phi[L]
    vD = boundary.edge_values(mesh, de)
    phiD = boundary.edge_phi(mesh, de)
    ad = u0[Kd]
    dphid = phi[Kd] - phiD

    for i in range(n):
        A, B = U[i, K], U[i, L]
        mi, mia, mib = log_mean_grad(A, B)
        flux = Ti * (m0 * (A - B) - mi * (a - b) + m0 * mi * bz * dphi)
        np.add.at(R[:, i], K, flux)
        np.add.at(R[:, i], L, -flux)
        # Dirichlet edges
        v0d, vid = vD[0], vD[i + 1]
        Ad = U[i, Kd]
        fd = Td * (v0d * (Ad - vid) - vid * (ad - v0d) + v0d * vid * bz * dphid)
        np.add.at(R[:, i], Kd, fd)
        R[:, i] += area * (U[i] - prev.u[i + 1]) / tau
        if s_means is not None:
            R[:, i] -= area * s_means[i]
        if not jacobian:
            continue
        d_a = Ti * (m0a * (A - B) - mi + m0a * mi * bz * dphi)
        d_b = Ti * (m0b * (A - B) + mi + m0b * mi * bz * dphi)
        d_A = Ti * (m0 - mia * (a - b) + m0 * mia * bz * dphi)
        d_B = Ti * (-m0 - mib * (a - b) + m0 * mib * bz * dphi)
        d_p = Ti * m0 * mi * bz
        for sgn, rc in ((1.0, K), (-1.0, L)):
            for k in range(n):
                add(rc, i, K, k, -sgn * d_a)
                add(rc, i, L, k, -sgn * d_b)
            add(rc, i, K, i, sgn * d_A)
            add(rc, i, L, i, sgn * d_B)
            add(rc, i, K, n, sgn * d_p)
            add(rc, i, L, n, -sgn * d_p)
        for k in range(n):
            add(Kd, i, Kd, k, Td * vid)  # d/du_k of -vid * (u0 - v0d), u0 = 1 - sum
        add(Kd, i, Kd, i, Td * v0d)
        add(Kd, i, Kd, n, Td * v0d * vid * bz)
        add(np.arange(nc), i, np.arange(nc), i, area / tau)

    # potential row
    fp = lam2 * Ti * dphi
    np.add.at(R[:, n], K, fp)
    np.add.at(R[:, n], L, -fp)
    np.add.at(R[:, n], Kd, lam2 * Td * dphid)
    rhs = params.z * (1.0 - u0)
    if f_means is not None:
        rhs = rhs + f_means
    R[:, n] -= area * rhs
    pure_neumann = len(de) == 0
    if pure_neumann:
        R[0, n] = phi[0]
    if jacobian:
        for sgn, rc in ((1.0, K), (-1.0, L)):
            add(rc, n, K, n, sgn * lam2 * Ti)
            add(rc, n, L, n, -sgn * lam2 * Ti)
        add(Kd, n, Kd, n, lam2 * Td)
        cells = np.arange(nc)
        for k in range(n):
            add(cells, n, cells, k, -area * params.z)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        if pure_neumann:
            keep = r != n
            r, c, v = np.append(r[keep], n), np.append(c[keep], n), np.append(v[keep], 1.0)
        J = sp.csr_matrix((v, (r, c)), shape=(nc * N, nc * N))
        return R.ravel(), J
    return R.ravel(), None


def solvent_rows(mesh: Mesh, params: ModelParams, boundary: BoundaryData, prev: FVState, state: FVState,
                 tau: float, t: float, sources=None) -> np.ndarray:
    """Independent assembly of the summed (solvent) balance.

    ``|K| (u_0 - u_0_old)/tau + sum_s F(u_0)(u_0s + sum_i u_is) - beta z F(phi) u_0s sum_i u_is
    + |K| sum_i mean_K s_i``, which equals minus the sum of the species rows.
    """
    n = params.n
    ev = edge_values(mesh, state.u, boundary)
    de = mesh.dirichlet_edges
    vD = boundary.edge_values(mesh, de)
    F0 = tpfa_fluxes(mesh, state.u[0], vD[0])
    Fp = tpfa_fluxes(mesh, state.phi, boundary.edge_phi(mesh, de))
    S = ev[1:].sum(axis=0)
    per_edge = F0 * (ev[0] + S) - params.beta * params.z * Fp * ev[0] * S
    out = mesh.areas * (state.u[0] - prev.u[0]) / tau + cell_flux_sum(mesh, per_edge)
    s_means, _ = source_means(mesh, params, t) if sources is None else sources
    if s_means is not None:
        out = out + mesh.areas * s_means.sum(axis=0)
    return out


# ----------------------------------------------------------------- Newton
@dataclass
class NewtonInfo:
    iterations: int
    residual: float
    halvings: int


def newton_advance(mesh: Mesh, params: ModelParams, boundary: BoundaryData, prev: FVState, tau: float,
                   tol: float = 1e-10, max_iter: int = 50, max_halvings: int = 30, guess: FVState | None = None):
    """Damped Newton for one backward Euler step; returns ``(state, info)``."""
    t = prev.t + tau
    n = params.n
    src = source_means(mesh, params, t)
    x = (guess or prev).unknowns()
    res, J = assemble_step_system(mesh, params, boundary, prev, x, tau, t, src)
    rnorm = np.abs(res).max()
    total_halvings = 0
    it = 0
    while rnorm > tol:
        if it >= max_iter:
            raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {rnorm:.3e})")
        it += 1
        dx = spla.splu(J.tocsc()).solve(-res)
        step = 1.0
        for _ in range(max_halvings + 1):
            xt = x + step * dx
            U, _p = _split(xt, n)
            if np.all(U > 0) and np.all(U.sum(axis=0) < 1.0):
                rt, Jt = assemble_step_system(mesh, params, boundary, prev, xt, tau, t, src)
                rt_norm = np.abs(rt).max()
                if rt_norm < rnorm or rt_norm <= tol:
                    break
            step *= 0.5
            total_halvings += 1
        else:
            raise PositivityError(f"damping failed to keep the iterate admissible (residual {rnorm:.3e})")
        x, res, J, rnorm = xt, rt, Jt, rt_norm
        log.debug("newton it %d residual %.3e step %.3g", it, rnorm, step)
    U, phi = _split(x, n)
    state = FVState.from_species(prev.j + 1, t, U.copy(), phi.copy())
    return state, NewtonInfo(it, float(rnorm), total_halvings)


def run_trajectory(mesh: Mesh, params: ModelParams, boundary: BoundaryData, initial: FVState, times, **newton_kw) -> Trajectory:
    """March the scheme over ``times`` (``times[0]`` must equal ``initial.t``)."""
    times = np.asarray(times, dtype=float)
    if len(times) == 0 or abs(times[0] - initial.t) > 1e-14:
        raise ValueError("time grid must start at the initial time")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    traj = Trajectory(mesh, params, boundary, [initial])
    state = initial
    for j in range(1, len(times)):
        try:
            state, info = newton_advance(mesh, params, boundary, state, times[j] - times[j - 1], **newton_kw)
        except SolverError as exc:
            raise SolverError(f"step {j}: {exc}") from exc
        state.t = float(times[j])
        traj.states.append(state)
        log.info("step %d t=%.4f newton %d its, residual %.2e", j, state.t, info.iterations, info.residual)
    return traj
