"""A posteriori error estimators for the reconstructed finite volume solution.

The module has three layers:

* :class:`ConstantsLedger` with every constant entering the bounds;
* step-level building blocks (elliptic, temporal and rate estimators for the
  solvent, residual triplets for species, solvent and potential), which act
  on :class:`FieldEval` snapshots of reconstructions at quadrature points;
* :func:`estimate`, one sweep over the time steps assembling an
  :class:`EstimatorReport` with the total estimators.

Sign convention: ``F`` is the outflow two-point flux of :mod:`fvsolver`, so a
reconstructed normal derivative integrates to ``-F`` on each edge.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .fvsolver import FVState, source_means
from .mesh import DIRICHLET, INTERIOR, NEUMANN, Mesh
from .quadrature import edge_lattice, get_rule, lattice_points
from .reconstruct import EdgeData, MorleyFunction, SpaceTimeReconstruction


# ------------------------------------------------------------------ constants
@dataclass(frozen=True)
class ConstantsLedger:
    """Constants of the estimators; ``C_F = None`` means ``diam(Omega)/pi``."""

    q: float = 42.0
    q_tilde: float = 2.1
    p_star: float = 1.0
    c_green: float = 1.0
    C_G: float = 1.02
    C_S: float = 12.02
    C_F: Optional[float] = None
    C_F_neumann: Optional[float] = None
    C_P2: float = 1.0 / math.pi
    C_P1: float = 0.5
    C_cti: float = 2.0
    gamma: float = 0.3
    N_boundary: int = 3
    d: int = 2
    eta2_terms: str = "two"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.q <= self.d:
            raise ValueError("q must exceed the space dimension")
        if not 0 < self.theta < 1:
            raise ValueError(f"theta = {self.theta} outside (0, 1)")
        if self.eta2_terms not in ("two", "three"):
            raise ValueError("eta2_terms must be 'two' or 'three'")

    @property
    def q_dual(self) -> float:
        return math.inf if self.p_star == 1 else self.p_star / (self.p_star - 1)

    @property
    def p(self) -> float:
        return 1.0 / (0.5 - 1.0 / self.q)

    @property
    def theta(self) -> float:
        return self.d / 2 - self.d / self.p

    @property
    def mu(self) -> float:
        th = self.theta
        return (1 - th) / 2 * (1 / (2 * (1 + th))) ** ((th + 1) / (th - 1))

    def C_P(self, p: float) -> float:
        if p == 1:
            return self.C_P1
        if p == 2:
            return self.C_P2
        raise ValueError(f"no Poincare constant configured for p = {p}")

    def C_app(self, p: float) -> float:
        cp = self.C_P(p)
        return self.C_cti * (cp ** (1 - 1 / p) + cp)

    @property
    def C_app1(self) -> float:
        return self.C_app(1)

    @property
    def C_app2(self) -> float:
        return self.C_app(2)

    @property
    def CF(self) -> float:
        if self.C_F is None:
            raise ValueError("C_F unresolved; call resolve(mesh) first")
        return self.C_F

    @property
    def CF_neumann(self) -> float:
        return self.CF if self.C_F_neumann is None else self.C_F_neumann

    def resolve(self, mesh: Mesh) -> "ConstantsLedger":
        if self.C_F is not None:
            return self
        return replace(self, C_F=mesh.diameter / math.pi)

    def gronwall(self, norm: float, gamma: float | None = None) -> float:
        """``2 C_G^{2/(1-t)} (1+C_F^2)^{t/(1-t)} mu / gamma^{(1+t)/(1-t)} norm^{2/(1-t)}``."""
        th = self.theta
        g = 1.0 if gamma is None else gamma ** ((1 + th) / (1 - th))
        return (2 * self.C_G ** (2 / (1 - th)) * (1 + self.CF**2) ** (th / (1 - th)) * self.mu / g
                * norm ** (2 / (1 - th)))

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.theta < 1:
            out.append("theta outside (0, 1)")
        if not 0 < self.gamma <= 1:
            out.append("gamma outside (0, 1]")
        if self.C_G > self.C_S**self.theta + 1e-15:
            out.append("C_G exceeds C_S^theta")
        return out

    def snapshot(self) -> dict:
        out = asdict(self)
        out.update(p=self.p, theta=self.theta, mu=self.mu, C_app1=self.C_app1, C_app2=self.C_app2)
        return out


# ------------------------------------------------------------ evaluation
class EvalGeometry:
    """Quadrature points, edge traces and norms shared by all evaluations on a mesh."""

    def __init__(self, mesh: Mesh, tri_degree: int = 8, edge_degree: int = 9):
        self.mesh = mesh
        self.rule = get_rule("triangle", tri_degree)
        self.erule = get_rule("edge", edge_degree)
        self.lat = lattice_points(4)
        self.elat = edge_lattice(9)
        self.qpts = mesh.map_points(self.rule.points)
        self.lpts = mesh.map_points(self.lat)
        self.epts = mesh.edge_points(self.erule.points)
        self.interior = mesh.edge_kind == INTERIOR
        self.neumann = mesh.edge_kind == NEUMANN
        self.dirichlet = mesh.edge_kind == DIRICHLET
        self.h = mesh.diameters
        K = mesh.edge_cells[:, 0]
        L = np.where(self.interior, mesh.edge_cells[:, 1], K)
        self.side_cells = (K, L)
        self.normals = mesh.edge_normals
        # h-weights: sum over cells of h_K over the cell's edges in a set
        hK, hL = self.h[K], self.h[L]
        self.h_not_D = np.where(self.interior, hK + hL, np.where(self.neumann, hK, 0.0))
        self.h_not_N = np.where(self.interior, hK + hL, np.where(self.dirichlet, hK, 0.0))
        self._ebary = {}

    def edge_bary(self, s_key: str):
        if s_key not in self._ebary:
            s = self.erule.points if s_key == "quad" else self.elat
            b0 = self.mesh.edge_bary(s, 0)
            b1 = b0.copy()
            ie = np.nonzero(self.interior)[0]
            b1[ie] = self.mesh.edge_bary(s, 1, ie)
            self._ebary[s_key] = (b0, b1)
        return self._ebary[s_key]

    # norms
    def cell_sq(self, v: np.ndarray) -> np.ndarray:
        """Per-cell integral of ``|v|^2``; ``v`` is (nc, nq) or (nc, nq, 2)."""
        s = v**2 if v.ndim == 2 else np.sum(v**2, axis=-1)
        return (s @ self.rule.weights) * self.mesh.areas / 0.5

    def cell_pow(self, v: np.ndarray, p: float) -> np.ndarray:
        a = np.abs(v) if v.ndim == 2 else np.linalg.norm(v, axis=-1)
        return ((a**p) @ self.rule.weights) * self.mesh.areas / 0.5

    def lq(self, v: np.ndarray, p: float) -> float:
        return float(self.cell_pow(v, p).sum() ** (1.0 / p))

    def l2(self, v: np.ndarray) -> float:
        return float(math.sqrt(self.cell_sq(v).sum()))

    def edge_sq(self, v: np.ndarray) -> np.ndarray:
        return ((v**2) @ self.erule.weights) * self.mesh.edge_lengths


class FieldEval:
    """Values, gradients and Laplacians of a reconstruction at quadrature points.

    Edge arrays have a leading side axis; for boundary edges both sides hold
    the one-sided trace. With ``linf=True`` lattice samples for maximum norms
    are stored as well. Instances combine linearly, like the functions.
    """

    _arrays = ("val", "grad", "lap", "e_val", "e_grad", "l_val", "l_lap", "el_grad")

    def __init__(self, geo: EvalGeometry, w: MorleyFunction | None = None, linf: bool = False):
        self.geo = geo
        if w is None:
            return
        pts = geo.rule.points
        self.val = w.value(pts)
        self.grad = w.gradient(pts)
        self.lap = w.laplacian(pts)
        b = geo.edge_bary("quad")
        cells = geo.side_cells
        self.e_val = np.stack([w.value(b[s], cells[s]) for s in (0, 1)])
        self.e_grad = np.stack([w.gradient(b[s], cells[s]) for s in (0, 1)])
        if linf:
            self.l_val = w.value(geo.lat)
            self.l_lap = w.laplacian(geo.lat)
            bl = geo.edge_bary("lattice")
            self.el_grad = np.stack([w.gradient(bl[s], cells[s]) for s in (0, 1)])

    def _combine(self, other, a, b):
        out = FieldEval(self.geo)
        for name in self._arrays:
            x = getattr(self, name, None)
            y = getattr(other, name, None) if other is not None else None
            if x is None or (other is not None and y is None):
                continue
            setattr(out, name, a * x + (b * y if other is not None else 0.0))
        return out

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, c):
        return self._combine(None, c, 0.0)

    __rmul__ = __mul__

    def normal_jump(self, grad_edges: np.ndarray | None = None) -> np.ndarray:
        """``[[g]]`` of the gradient along each edge (zero where not defined by the caller)."""
        g = self.e_grad if grad_edges is None else grad_edges
        n = self.geo.normals[:, None, :]
        interior = self.geo.interior[:, None]
        return np.where(interior, np.sum((g[0] - g[1]) * n, axis=-1), np.sum(g[0] * n, axis=-1))


def vector_jump(geo: EvalGeometry, W: np.ndarray) -> np.ndarray:
    """Jump of a vector field given on both sides (2, ne, ns, 2)."""
    n = geo.normals[:, None, :]
    return np.where(geo.interior[:, None], np.sum((W[0] - W[1]) * n, axis=-1), np.sum(W[0] * n, axis=-1))


def edge_average_normal(geo: EvalGeometry, W: np.ndarray) -> np.ndarray:
    """``{{W}} . n`` with ``n`` out of the first cell; one-sided on the boundary."""
    n = geo.normals[:, None, :]
    return np.sum(0.5 * (W[0] + W[1]) * n, axis=-1)


@dataclass
class StepEval:
    t: float
    u0: FieldEval
    species: list
    phi: Optional[FieldEval]
    state: FVState
    edges: EdgeData
    A: np.ndarray

    def mix(self, other: "StepEval", a: float, b: float):
        """Field evaluations of ``a * self + b * other`` (time interpolation)."""
        comb = lambda x, y: x * a + y * b  # noqa: E731
        return (comb(self.u0, other.u0), [comb(x, y) for x, y in zip(self.species, other.species)],
                comb(self.phi, other.phi) if self.phi is not None else None)


def step_eval(geo: EvalGeometry, rec: SpaceTimeReconstruction, j: int, linf: bool, with_phi: bool) -> StepEval:
    s = rec.steps[j]
    return StepEval(
        t=float(rec.times[j]),
        u0=FieldEval(geo, s.u0, linf=linf),
        species=[FieldEval(geo, w) for w in s.species],
        phi=FieldEval(geo, s.phi) if with_phi else None,
        state=rec.traj[j],
        edges=s.edges,
        A=rec.A(j),
    )


# ------------------------------------------------- solvent (heat) estimators
def eta_S(geo: EvalGeometry, u0: FieldEval, A: np.ndarray, ledger: ConstantsLedger, q_dual=2) -> float:
    """Elliptic estimator for ``-Laplace w = A`` against ``u0``; ``q_dual`` in {2, inf}."""
    h = geo.h
    if q_dual == 2:
        cell = ledger.C_P2**2 * h**2 * geo.cell_sq(A[:, None] + u0.lap)
        jump = geo.edge_sq(u0.normal_jump())
        s = cell.sum() + ledger.C_app2**2 * ledger.N_boundary / 4.0 * np.sum(geo.h_not_D * jump)
        return float(math.sqrt(2.0) * math.sqrt(max(s, 0.0)))
    if q_dual in (np.inf, "inf"):
        cell = ledger.C_P1 * h * np.abs(A[:, None] + u0.l_lap).max(axis=1)
        jmax = np.abs(u0.normal_jump(u0.el_grad)).max(axis=1)
        jmax = np.where(geo.dirichlet, 0.0, jmax)
        mesh = geo.mesh
        per_cell = cell + ledger.C_app1 / 2.0 * jmax[mesh.cell_edges].sum(axis=1)
        return float(per_cell.max())
    raise ValueError("q_dual must be 2 or inf")


def eta_T_inf(u0_prev: FieldEval, u0: FieldEval, A_prev, A, tau: float, s0_prev=None, s0=None) -> float:
    """Trapezoidal-in-time integral of ``||R(t)||_inf`` with
    ``R = s_0 - l_{j-1} A^{j-1} - l_j A^j - (u0^j - u0^{j-1}) / tau``."""
    D = (u0.l_val - u0_prev.l_val) / tau
    r0 = -A_prev[:, None] - D
    r1 = -A[:, None] - D
    if s0_prev is not None:
        r0 = r0 + s0_prev
        r1 = r1 + s0
    return float(0.5 * tau * (np.abs(r0).max() + np.abs(r1).max()))


def eta_dot_S(geo, u0_prev: FieldEval, u0: FieldEval, A_prev, A, tau: float, ledger, q_dual=np.inf) -> float:
    return eta_S(geo, u0 - u0_prev, A - A_prev, ledger, q_dual) / tau


def heat_max_estimator(e0_inf: float, eta_T: np.ndarray, eta_dot: np.ndarray, taus: np.ndarray,
                       eta_S_inf: np.ndarray, ledger: ConstantsLedger) -> float:
    """``||e(0)||_inf + sum eta_T + C_Green sum tau eta_dot + C_Green max eta_S``."""
    return float(e0_inf + np.sum(eta_T) + ledger.c_green * np.sum(taus * eta_dot)
                 + ledger.c_green * np.max(eta_S_inf))


def heat_H1_estimator(e0_l2: float, taus: np.ndarray, eta_S2: np.ndarray, time_mismatch: np.ndarray,
                      grad_diff: np.ndarray, ledger: ConstantsLedger, osc: np.ndarray | None = None) -> float:
    """Squared bound ``2||e(0)||^2 + sum tau (eta_S2 + C_F ||.|| + ||grad diff|| [+ osc])^2``.

    Arrays are indexed by ``j = 1..J``.
    """
    per = eta_S2 + ledger.CF * time_mismatch + grad_diff
    if osc is not None:
        per = per + osc
    return float(2.0 * e0_l2**2 + np.sum(taus * per**2))


# ----------------------------------------------------- residual triplets
def _species_fields(geo, u0: FieldEval, ui: FieldEval, phi: FieldEval | None, bz: float):
    """Flux field ``u0 grad ui - ui grad u0 + ui u0 bz grad phi`` and its divergence."""
    W = u0.val[..., None] * ui.grad - ui.val[..., None] * u0.grad
    div = u0.val * ui.lap - ui.val * u0.lap
    We = u0.e_val[..., None] * ui.e_grad - ui.e_val[..., None] * u0.e_grad
    if phi is not None and bz != 0.0:
        prod = ui.val * u0.val
        W = W + bz * prod[..., None] * phi.grad
        gprod = ui.grad * u0.val[..., None] + u0.grad * ui.val[..., None]
        div = div + bz * (np.sum(gprod * phi.grad, axis=-1) + prod * phi.lap)
        We = We + bz * (ui.e_val * u0.e_val)[..., None] * phi.e_grad
    return W, div, We


def _triplet(geo, ledger, elem, We, W_prev, W, jump_terms_sq, time_mismatch_l2, CF):
    cell = ledger.C_P2**2 * geo.h**2 * geo.cell_sq(elem)
    jump = geo.edge_sq(vector_jump(geo, We))
    RS = math.sqrt(2.0) * math.sqrt(cell.sum() + ledger.N_boundary / 4.0 * ledger.C_app2**2 * np.sum(geo.h_not_D * jump))
    RT = geo.l2(W - W_prev)
    RR = CF * time_mismatch_l2 + ledger.C_app2 * math.sqrt(ledger.N_boundary) / 2.0 * math.sqrt(
        np.sum(geo.h_not_N * jump_terms_sq))
    return float(RS), float(RT), float(RR)


def _time_mismatch(geo, w_prev: FieldEval, w: FieldEval, cell_prev, cell, tau):
    """``|| (w^j - w^{j-1})/tau - (c^j - c^{j-1})/tau ||`` for reconstruction ``w`` and cell values ``c``."""
    d = (w.val - w_prev.val) / tau - ((cell - cell_prev) / tau)[:, None]
    return geo.l2(d)


def residual_triplet_reduced(geo: EvalGeometry, i: int, prev: StepEval, cur: StepEval, tau: float,
                             ledger: ConstantsLedger, s_mean=None) -> tuple[float, float, float]:
    """``(R_S, R_T, R_R)`` of species ``i`` (1-based) for the model without potential coupling."""
    u0, ui = cur.u0, cur.species[i - 1]
    W = u0.val[..., None] * ui.grad - ui.val[..., None] * u0.grad
    div = u0.val * ui.lap - ui.val * u0.lap
    We = u0.e_val[..., None] * ui.e_grad - ui.e_val[..., None] * u0.e_grad
    pu0, pui = prev.u0, prev.species[i - 1]
    Wp = pu0.val[..., None] * pui.grad - pui.val[..., None] * pu0.grad
    dt_cell = (cur.state.u[i] - prev.state.u[i]) / tau
    elem = dt_cell[:, None] - div
    if s_mean is not None:
        elem = elem - s_mean[:, None]
    # edge mismatch  u_i {{grad u0}}.n + u_is F(u0) / |s|
    avg = edge_average_normal(geo, u0.e_grad)
    ed = cur.edges
    mis = ui.e_val[0] * avg + (ed.values[i] * ed.flux[0] / geo.mesh.edge_lengths)[:, None]
    tm = _time_mismatch(geo, pui, ui, prev.state.u[i], cur.state.u[i], tau)
    return _triplet(geo, ledger, elem, We, Wp, W, geo.edge_sq(mis), tm, ledger.CF)


def residual_triplet_general(geo: EvalGeometry, which, prev: StepEval, cur: StepEval, tau: float,
                             ledger: ConstantsLedger, z: float, beta: float, lam: float,
                             s_mean=None, f_mean=None):
    """Residual bounds of the coupled model.

    ``which`` is ``"phi"`` (returns ``(cell/jump part, coupling part)`` at step
    ``cur``), ``0`` for the solvent or a species index ``1..n``; the latter two
    return ``(R_S, R_T, R_R)``.
    """
    bz = beta * z
    mesh = geo.mesh
    ed = cur.edges
    if which == "phi":
        phi, u0 = cur.phi, cur.u0
        src = z / lam**2 * (1.0 - cur.state.u[0])
        if f_mean is not None:
            src = src + f_mean / lam**2
        cell = ledger.C_P2**2 * geo.h**2 * geo.cell_sq(src[:, None] + phi.lap)
        jump = geo.edge_sq(phi.normal_jump())
        main = math.sqrt(2.0) * math.sqrt(cell.sum() + ledger.C_app2**2 * ledger.N_boundary / 4.0
                                          * np.sum(geo.h_not_D * jump))
        coupling = abs(z) / lam**2 * ledger.CF * geo.l2(u0.val - cur.state.u[0][:, None])
        return float(main), float(coupling)
    if which == 0:
        u0, phi = cur.u0, cur.phi
        pu0, pphi = prev.u0, prev.phi

        def field(a: FieldEval, ph: FieldEval):
            m = a.val * (1.0 - a.val)
            W = a.grad - bz * m[..., None] * ph.grad
            div = a.lap - bz * ((1.0 - 2.0 * a.val) * np.sum(a.grad * ph.grad, axis=-1) + m * ph.lap)
            We = a.e_grad - bz * (a.e_val * (1.0 - a.e_val))[..., None] * ph.e_grad
            return W, div, We

        W, div, We = field(u0, phi)
        Wp, _, _ = field(pu0, pphi)
        elem = ((cur.state.u[0] - prev.state.u[0]) / tau)[:, None] - div
        if s_mean is not None:
            elem = elem + s_mean.sum(axis=0)[:, None]
        S = ed.values[1:].sum(axis=0)
        avg = edge_average_normal(geo, phi.e_grad)
        mis = bz * u0.e_val[0] * (1.0 - u0.e_val[0]) * avg + (bz * ed.values[0] * S * ed.flux_phi
                                                                / mesh.edge_lengths)[:, None]
        tm = _time_mismatch(geo, pu0, u0, prev.state.u[0], cur.state.u[0], tau)
        return _triplet(geo, ledger, elem, We, Wp, W, geo.edge_sq(mis), tm, ledger.CF_neumann)
    i = int(which)
    u0, ui, phi = cur.u0, cur.species[i - 1], cur.phi
    W, div, We = _species_fields(geo, u0, ui, phi, bz)
    Wp, _, _ = _species_fields(geo, prev.u0, prev.species[i - 1], prev.phi, bz)
    elem = ((cur.state.u[i] - prev.state.u[i]) / tau)[:, None] - div
    if s_mean is not None:
        elem = elem - s_mean[i - 1][:, None]
    drift = u0.e_grad
    if bz != 0.0:
        drift = drift - bz * u0.e_val[..., None] * phi.e_grad
    avg = edge_average_normal(geo, drift)
    num = ed.flux[0]
    if bz != 0.0:
        num = num - bz * ed.values[0] * ed.flux_phi
    mis = ui.e_val[0] * avg + (ed.values[i] * num / mesh.edge_lengths)[:, None]
    tm = _time_mismatch(geo, prev.species[i - 1], ui, prev.state.u[i], cur.state.u[i], tau)
    return _triplet(geo, ledger, elem, We, Wp, W, geo.edge_sq(mis), tm, ledger.CF)


# ----------------------------------------------------------- space-time norms
def xq_norm(samples: list, taus: np.ndarray, q: float, d: int = 2) -> float:
    """``L^{2q/(q-d)}(0,T; L^q)`` norm from spatial norms sampled per interval.

    ``samples[j-1]`` holds the spatial ``L^q`` norms sampled in interval ``j``;
    the interval value is their maximum.
    """
    r = 2.0 * q / (q - d)
    vals = np.array([max(s) for s in samples])
    return float(np.sum(np.asarray(taus) * vals**r) ** (1.0 / r))


def simpson(f0, fm, f1, tau):
    return tau / 6.0 * (f0 + 4.0 * fm + f1)


# -------------------------------------------------------------------- totals
def _log(v: float) -> float:
    return math.log(v) if v > 0 else -math.inf


def total_estimator_reduced(ledger: ConstantsLedger, init_i_l2: float, init_0_l2: float, taus, eta_R_i, eta2,
                            grad_ui_l2l2_sq: float, eta_inf: float, grad_u0_xq: float):
    """Natural log of the squared bound for one species (reduced model), the
    prefactor and the Gronwall exponent."""
    g = ledger.gamma
    pre = (2.0 * init_i_l2**2 + 12.0 / g * init_0_l2**2
           + 12.0 / g * np.sum(taus * (np.asarray(eta_R_i) ** 2 + np.asarray(eta2) ** 2))
           + 12.0 / g * grad_ui_l2l2_sq * eta_inf**2)
    expo = ledger.gronwall(grad_u0_xq, g)
    return _log(pre) + expo, float(pre), float(expo)


def total_estimator_general(ledger: ConstantsLedger, z: float, beta: float, lam: float, T: float,
                            init_l2: np.ndarray, taus, eta_R_phi, eta_R0, eta_R_species,
                            grad_phi_xq: float, F_xq: float, grad_ui_linf: np.ndarray, grad_phi_linf: float):
    """Natural logs of the squared bounds ``(eta_2^J, eta_Phi^J, [eta_2^{i,J}])``
    of the coupled model, plus details.

    Logs are returned because the Gronwall factors can exceed the float range.
    """
    taus = np.asarray(taus)
    zb = abs(z * beta)
    CF = ledger.CF
    rphi = np.asarray(eta_R_phi)
    pre0 = 2.0 * init_l2[0] ** 2 + np.sum(taus * (zb**2 / 4.0 * rphi**2 + 4.0 * np.asarray(eta_R0) ** 2))
    expo0 = ledger.gronwall(zb * grad_phi_xq) + CF**2 * z**4 * beta**2 / (8.0 * lam**4) * T
    L2 = _log(pre0) + expo0
    Lphi = float(np.logaddexp(_log(CF**2 * abs(z) / lam**2) + L2, _log(np.sum(taus * rphi**2))))
    g = ledger.gamma
    coup = (1.0 + ledger.C_S * math.sqrt(1.0 + CF)) * zb * grad_phi_linf + CF * z**2 * beta / lam**2
    expo_i = ledger.gronwall(F_xq, g)
    species = []
    for i, eta_R_i in enumerate(eta_R_species, start=1):
        direct = (2.0 * init_l2[i] ** 2
                  + 12.0 / g * CF**2 * np.sum(taus * (zb**2 * rphi**2 + np.asarray(eta_R_i) ** 2)))
        via_solvent = _log(12.0 / g * (grad_ui_linf[i - 1] ** 2 + 2.0 * coup**2)) + L2
        species.append(float(np.logaddexp(_log(direct), via_solvent)) + expo_i)
    details = dict(pre0=float(pre0), expo0=float(expo0), expo_i=float(expo_i), coupling=float(coup))
    return float(L2), Lphi, species, details


# -------------------------------------------------------------------- report
@dataclass
class EstimatorReport:
    model: str
    times: np.ndarray
    steps: dict = field(default_factory=dict)  # name -> array over j = 0..J
    totals: dict = field(default_factory=dict)
    log_totals: dict = field(default_factory=dict)  # natural log of each total
    norms: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def set_total(self, name: str, log_value: float):
        self.log_totals[name] = float(log_value)
        self.totals[name] = math.exp(log_value) if log_value < 709.0 else math.inf

    def step_table(self) -> list[dict]:
        rows = []
        for j, t in enumerate(self.times):
            row = {"j": j, "t": float(t)}
            for k, v in self.steps.items():
                row[k] = float(v[j])
            rows.append(row)
        return rows


def _lq_norms(geo, u0: FieldEval, species, phi, z, beta, q, q_tilde):
    out = {"grad_u0_q": geo.lq(u0.grad, q)}
    out["grad_ui_qt"] = [geo.lq(s.grad, q_tilde) for s in species]
    out["grad_ui_sq"] = [geo.cell_sq(s.grad).sum() for s in species]
    if phi is not None:
        out["grad_phi_q"] = geo.lq(phi.grad, q)
        out["grad_phi_qt"] = geo.lq(phi.grad, q_tilde)
        F = u0.grad - (z * beta) * u0.val[..., None] * phi.grad
        out["F_q"] = geo.lq(F, q)
    return out


def estimate(rec: SpaceTimeReconstruction, ledger: ConstantsLedger | None = None, model: str | None = None,
             initial: Optional[Callable] = None, hooks=(), geo: EvalGeometry | None = None) -> EstimatorReport:
    """Assemble every estimator over the trajectory in one sweep.

    ``model`` is ``"reduced"`` (heat branch, requires z = 0) or ``"general"``;
    by default it follows ``z``. ``initial(x, y)`` returns the exact initial
    fields ``(v_0, ..., v_n)``; without it initial errors are taken as zero.
    ``hooks`` receive ``start(ev0)`` and ``interval(j, ev_prev, ev)`` calls
    and can accumulate further quantities (e.g. true errors) in the same sweep.
    """
    traj = rec.traj
    mesh = traj.mesh
    params = traj.params
    ledger = (ledger or ConstantsLedger()).resolve(mesh)
    model = model or ("reduced" if params.z == 0 else "general")
    if model == "reduced" and params.z != 0:
        raise ValueError("the reduced estimator requires z = 0")
    reduced = model == "reduced"
    geo = geo or EvalGeometry(mesh)
    J = rec.J
    n = rec.n
    taus = traj.taus
    times = rec.times
    z, beta, lam = params.z, params.beta, params.lam
    has_src = params.sources is not None

    def exact_sources(t, pts):
        s = np.asarray(params.sources(t, pts[..., 0], pts[..., 1]), dtype=float)
        return np.atleast_3d(s) if s.ndim == 2 else s

    nan = np.full(J + 1, np.nan)
    st = {k: nan.copy() for k in ("eta_S2", "eta_Sinf", "eta_Tinf", "eta_dotSinf", "grad_diff", "time_mismatch0",
                                  "osc0", "eta2_two", "eta2_three", "eta_R_phi", "eta_R_phi_main",
                                  "eta_R_phi_coupling", "osc_phi", "R_T0", "R_S0", "R_R0", "eta_R0")}
    for i in range(1, n + 1):
        for k in ("R_S", "R_T", "R_R", "osc", "eta_R"):
            st[f"{k}_{i}"] = nan.copy()

    ev_prev = step_eval(geo, rec, 0, linf=reduced, with_phi=not reduced)
    for hk in hooks:
        hk.start(ev_prev)

    # initial errors
    init_l2 = np.zeros(n + 1)
    e0_inf = 0.0
    if initial is not None:
        v0 = np.asarray(initial(geo.qpts[..., 0], geo.qpts[..., 1]))
        fields0 = [ev_prev.u0] + ev_prev.species
        init_l2 = np.array([geo.l2(f.val - v0[k]) for k, f in enumerate(fields0)])
        if reduced:
            vl = np.asarray(initial(geo.lpts[..., 0], geo.lpts[..., 1]))
            e0_inf = float(np.abs(ev_prev.u0.l_val - vl[0]).max())

    if reduced:
        st["eta_S2"][0] = eta_S(geo, ev_prev.u0, ev_prev.A, ledger, 2)
        st["eta_Sinf"][0] = eta_S(geo, ev_prev.u0, ev_prev.A, ledger, np.inf)
    else:
        s_m, f_m = source_means(mesh, params, times[0])
        main, coup = residual_triplet_general(geo, "phi", ev_prev, ev_prev, 1.0, ledger, z, beta, lam, s_m, f_m)
        phi_prev_val = (main, coup)

    xq = {"grad_u0": [], "grad_phi": [], "F": []}
    grad_ui_l2l2 = np.zeros(n)
    grad_ui_linf = np.zeros(n)
    grad_phi_linf = 0.0

    def account_norms(nrm):
        nonlocal grad_phi_linf
        for i in range(n):
            grad_ui_linf[i] = max(grad_ui_linf[i], nrm["grad_ui_qt"][i])
        if "grad_phi_qt" in nrm:
            grad_phi_linf = max(grad_phi_linf, nrm["grad_phi_qt"])

    nrm_prev = _lq_norms(geo, ev_prev.u0, ev_prev.species, ev_prev.phi, z, beta, ledger.q, ledger.q_tilde)
    account_norms(nrm_prev)

    for j in range(1, J + 1):
        tau = taus[j - 1]
        t0, t1 = times[j - 1], times[j]
        tm = 0.5 * (t0 + t1)
        ev = step_eval(geo, rec, j, linf=reduced, with_phi=not reduced)
        mid = ev_prev.mix(ev, 0.5, 0.5)
        nrm = _lq_norms(geo, ev.u0, ev.species, ev.phi, z, beta, ledger.q, ledger.q_tilde)
        nrm_mid = _lq_norms(geo, mid[0], mid[1], mid[2], z, beta, ledger.q, ledger.q_tilde)
        account_norms(nrm)
        account_norms(nrm_mid)
        xq["grad_u0"].append([nrm_prev["grad_u0_q"], nrm_mid["grad_u0_q"], nrm["grad_u0_q"]])
        if not reduced:
            xq["grad_phi"].append([nrm_prev["grad_phi_q"], nrm_mid["grad_phi_q"], nrm["grad_phi_q"]])
            xq["F"].append([nrm_prev["F_q"], nrm_mid["F_q"], nrm["F_q"]])
        for i in range(n):
            grad_ui_l2l2[i] += simpson(nrm_prev["grad_ui_sq"][i], nrm_mid["grad_ui_sq"][i], nrm["grad_ui_sq"][i], tau)

        s_m, f_m = source_means(mesh, params, t1)
        # data oscillation: max over the interval samples of ||s(t) - mean_K s(t_j)||
        osc = np.zeros(n)
        osc0 = 0.0
        if has_src:
            for t in (t0, tm, t1):
                sv = exact_sources(t, geo.qpts)
                for i in range(n):
                    osc[i] = max(osc[i], geo.l2(sv[i] - s_m[i][:, None]))
                osc0 = max(osc0, geo.l2(sv.sum(axis=0) - s_m.sum(axis=0)[:, None]))
        CF = ledger.CF
        for i in range(n):
            st[f"osc_{i + 1}"][j] = CF * osc[i]
        st["osc0"][j] = CF * osc0

        grad_diff = geo.l2(ev.u0.grad - ev_prev.u0.grad)
        st["grad_diff"][j] = grad_diff
        st["time_mismatch0"][j] = _time_mismatch(geo, ev_prev.u0, ev.u0, ev_prev.state.u[0], ev.state.u[0], tau)

        if reduced:
            eS2 = eta_S(geo, ev.u0, ev.A, ledger, 2)
            st["eta_S2"][j] = eS2
            st["eta_Sinf"][j] = eta_S(geo, ev.u0, ev.A, ledger, np.inf)
            s0p = s0 = None
            if has_src:
                s0p = -exact_sources(t0, geo.lpts).sum(axis=0)
                s0 = -exact_sources(t1, geo.lpts).sum(axis=0)
            st["eta_Tinf"][j] = eta_T_inf(ev_prev.u0, ev.u0, ev_prev.A, ev.A, tau, s0p, s0)
            st["eta_dotSinf"][j] = eta_dot_S(geo, ev_prev.u0, ev.u0, ev_prev.A, ev.A, tau, ledger, np.inf)
            st["eta2_two"][j] = eS2 + grad_diff + CF * osc0
            st["eta2_three"][j] = st["eta2_two"][j] + CF * st["time_mismatch0"][j]
            for i in range(1, n + 1):
                RS, RT, RR = residual_triplet_reduced(geo, i, ev_prev, ev, tau, ledger, s_m[i - 1] if has_src else None)
                RR += st[f"osc_{i}"][j]
                st[f"R_S_{i}"][j], st[f"R_T_{i}"][j], st[f"R_R_{i}"][j] = RS, RT, RR
                st[f"eta_R_{i}"][j] = RS + RT + RR
        else:
            main, coup = residual_triplet_general(geo, "phi", ev_prev, ev, tau, ledger, z, beta, lam, s_m, f_m)
            osc_phi = 0.0
            if params.permanent_charge is not None:
                for t in (t0, tm, t1):
                    fv = np.asarray(params.permanent_charge(t, geo.qpts[..., 0], geo.qpts[..., 1]))
                    osc_phi = max(osc_phi, geo.l2(fv - f_m[:, None]))
                osc_phi *= CF / lam**2
            st["osc_phi"][j] = osc_phi
            st["eta_R_phi_main"][j] = max(main, phi_prev_val[0])
            st["eta_R_phi_coupling"][j] = max(coup, phi_prev_val[1])
            st["eta_R_phi"][j] = max(main + coup, sum(phi_prev_val)) + osc_phi
            phi_prev_val = (main, coup)
            RS, RT, RR = residual_triplet_general(geo, 0, ev_prev, ev, tau, ledger, z, beta, lam,
                                                  s_m if has_src else None)
            RR += st["osc0"][j]
            st["R_S0"][j], st["R_T0"][j], st["R_R0"][j] = RS, RT, RR
            st["eta_R0"][j] = RS + RT + RR
            for i in range(1, n + 1):
                RS, RT, RR = residual_triplet_general(geo, i, ev_prev, ev, tau, ledger, z, beta, lam,
                                                      s_m if has_src else None)
                RR += st[f"osc_{i}"][j]
                st[f"R_S_{i}"][j], st[f"R_T_{i}"][j], st[f"R_R_{i}"][j] = RS, RT, RR
                st[f"eta_R_{i}"][j] = RS + RT + RR

        for hk in hooks:
            hk.interval(j, ev_prev, ev)
        ev_prev, nrm_prev = ev, nrm

    rep = EstimatorReport(model, times, st, constants=ledger.snapshot())
    sl = slice(1, None)
    rep.norms["grad_ui_L2L2_sq"] = grad_ui_l2l2.tolist()
    rep.norms["grad_ui_Linf_Lqt"] = grad_ui_linf.tolist()
    rep.norms["init_l2"] = init_l2.tolist()
    rep.norms["init_inf_0"] = e0_inf
    T = float(times[-1] - times[0])
    if J == 0:
        return rep
    if reduced:
        gx = xq_norm(xq["grad_u0"], taus, ledger.q, ledger.d)
        rep.norms["grad_u0_Xq"] = gx
        rep.norms["grad_u0_Xq_pow"] = gx ** (2 / (1 - ledger.theta))
        eta_inf = heat_max_estimator(e0_inf, st["eta_Tinf"][sl], st["eta_dotSinf"][sl], taus, st["eta_Sinf"], ledger)
        h1 = heat_H1_estimator(init_l2[0], taus, st["eta_S2"][sl], st["time_mismatch0"][sl], st["grad_diff"][sl],
                               ledger, st["osc0"][sl])
        rep.set_total("eta2", 0.5 * math.log(h1))
        rep.set_total("eta_inf", math.log(eta_inf))
        eta2_steps = st["eta2_two" if ledger.eta2_terms == "two" else "eta2_three"][sl]
        for i in range(1, n + 1):
            tot, pre, expo = total_estimator_reduced(ledger, init_l2[i], init_l2[0], taus, st[f"eta_R_{i}"][sl],
                                                     eta2_steps, grad_ui_l2l2[i - 1], eta_inf, gx)
            rep.set_total(f"eta2_{i}", 0.5 * tot)
            rep.norms[f"exponent_{i}"] = expo
    else:
        gpx = xq_norm(xq["grad_phi"], taus, ledger.q, ledger.d)
        fx = xq_norm(xq["F"], taus, ledger.q, ledger.d)
        rep.norms["grad_phi_Xq"] = gpx
        rep.norms["F_Xq"] = fx
        rep.norms["F_Xq_pow"] = fx ** (2 / (1 - ledger.theta))
        rep.norms["grad_phi_Linf_Lqt"] = grad_phi_linf
        eta2, etaphi, sps, det = total_estimator_general(
            ledger, z, beta, lam, T, init_l2, taus, st["eta_R_phi"][sl], st["eta_R0"][sl],
            [st[f"eta_R_{i}"][sl] for i in range(1, n + 1)], gpx, fx, grad_ui_linf, grad_phi_linf)
        rep.set_total("eta2", 0.5 * eta2)
        for i, v in enumerate(sps, start=1):
            rep.set_total(f"eta2_{i}", 0.5 * v)
        rep.set_total("eta_phi", 0.5 * etaphi)
        rep.norms.update(det)
    return rep
