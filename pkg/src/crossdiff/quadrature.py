"""Quadrature on triangles and edges, cellwise norms, jumps and averages.

Triangle rules are collapsed (Duffy) tensor products of Gauss-Legendre
rules, so every weight is positive. Points are stored in barycentric
coordinates so one rule serves every cell of a mesh.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_TRIANGLE_DEGREE = 30
MAX_EDGE_DEGREE = 41

DEFAULT_TRIANGLE_DEGREE = 8
DEFAULT_EDGE_DEGREE = 9


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference domain.

    For ``kind == "triangle"`` the points are barycentric triples and the
    weights sum to 1/2 (area of the unit reference triangle). For
    ``kind == "edge"`` the points are affine parameters in [0, 1] and the
    weights sum to 1.
    """

    kind: str
    degree: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def reference_measure(self) -> float:
        return 0.5 if self.kind == "triangle" else 1.0


@lru_cache(maxsize=None)
def get_rule(kind: str, degree: int) -> QuadratureRule:
    """Return a rule of the given kind that is exact up to ``degree``."""
    if degree < 0:
        raise ValueError(f"quadrature degree must be non-negative, got {degree}")
    if kind == "edge":
        if degree > MAX_EDGE_DEGREE:
            raise ValueError(f"unsupported edge degree {degree} (max {MAX_EDGE_DEGREE})")
        m = degree // 2 + 1
        x, w = np.polynomial.legendre.leggauss(m)
        pts = 0.5 * (x + 1.0)
        wts = 0.5 * w
        pts.setflags(write=False)
        wts.setflags(write=False)
        return QuadratureRule("edge", degree, pts, wts)
    if kind == "triangle":
        if degree > MAX_TRIANGLE_DEGREE:
            raise ValueError(f"unsupported triangle degree {degree} (max {MAX_TRIANGLE_DEGREE})")
        # integrand in the collapsed variable has degree + 1
        m = (degree + 1) // 2 + 1
        x, w = np.polynomial.legendre.leggauss(m)
        s = 0.5 * (x + 1.0)
        ws = 0.5 * w
        u, v = np.meshgrid(s, s, indexing="ij")
        wu, wv = np.meshgrid(ws, ws, indexing="ij")
        xr = u.ravel()
        yr = (v * (1.0 - u)).ravel()
        wts = (wu * wv * (1.0 - u)).ravel()
        bary = np.column_stack([1.0 - xr - yr, xr, yr])
        bary.setflags(write=False)
        wts.setflags(write=False)
        return QuadratureRule("triangle", degree, bary, wts)
    raise ValueError(f"unknown quadrature domain kind {kind!r}")


@lru_cache(maxsize=None)
def lattice_points(order: int = 4) -> np.ndarray:
    """Barycentric lattice of the given order; includes the vertices.

    Order 4 gives the 15-point lattice used for L-infinity sampling.
    """
    pts = [
        (i / order, j / order, (order - i - j) / order)
        for i in range(order + 1)
        for j in range(order + 1 - i)
    ]
    out = np.array(pts)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def edge_lattice(npts: int = 9) -> np.ndarray:
    out = np.linspace(0.0, 1.0, npts)
    out.setflags(write=False)
    return out


def integrate(f, vertices: np.ndarray, rule: QuadratureRule | None = None) -> float:
    """Integrate ``f`` over a single triangle or edge.

    ``vertices`` is a (3, 2) array for a triangle or a (2, 2) array for an
    edge. ``f`` takes an (m, 2) array of physical points and returns m
    values (or an (m, k) array for vector fields, integrated componentwise).
    """
    vertices = np.asarray(vertices, dtype=float)
    if len(vertices) == 3:
        rule = rule or get_rule("triangle", DEFAULT_TRIANGLE_DEGREE)
        pts = rule.points @ vertices
        e1 = vertices[1] - vertices[0]
        e2 = vertices[2] - vertices[0]
        measure = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    elif len(vertices) == 2:
        rule = rule or get_rule("edge", DEFAULT_EDGE_DEGREE)
        s = rule.points[:, None]
        pts = (1.0 - s) * vertices[0] + s * vertices[1]
        measure = float(np.hypot(*(vertices[1] - vertices[0])))
    else:
        raise ValueError("vertices must describe a triangle (3 points) or an edge (2 points)")
    vals = np.asarray(f(pts), dtype=float)
    return np.tensordot(rule.weights, vals, axes=(0, 0)) * measure / rule.reference_measure


def cell_integrals(values: np.ndarray, areas: np.ndarray, rule: QuadratureRule) -> np.ndarray:
    """Per-cell integrals from values sampled at the rule's points.

    ``values`` has shape (ncells, npts).
    """
    return (values @ rule.weights) * areas / rule.reference_measure


def edge_integrals(values: np.ndarray, lengths: np.ndarray, rule: QuadratureRule) -> np.ndarray:
    return (values @ rule.weights) * lengths


def lp_norm(values_at, p, areas: np.ndarray, rule: QuadratureRule | None = None, cells=None) -> float:
    """L^p norm over a set of cells.

    ``values_at(bary)`` returns an (ncells, npts) array of values at the
    barycentric points ``bary``. For ``p = inf`` the maximum is taken over
    the order-4 lattice (15 points per cell, vertices included), which is a
    lower approximation of the true supremum.
    """
    if p == np.inf or p == "inf":
        vals = np.abs(values_at(lattice_points(4)))
        if cells is not None:
            vals = vals[cells]
        return float(vals.max()) if vals.size else 0.0
    rule = rule or get_rule("triangle", DEFAULT_TRIANGLE_DEGREE)
    vals = np.abs(values_at(rule.points)) ** p
    ints = cell_integrals(vals, areas, rule)
    if cells is not None:
        ints = ints[cells]
    return float(ints.sum() ** (1.0 / p))


def edge_jump_average(f_K, n_K, f_L=None, vector=True):
    """Jump and average of a trace at points of an edge.

    ``vector=True`` (traces with a trailing axis of length 2): the jump is
    the scalar ``f_K . n_K + f_L . n_L`` with ``n_L = -n_K``. For scalar
    traces the jump is the vector ``f_K n_K + f_L n_L``. On a boundary edge
    pass ``f_L=None``: the jump is the one-sided normal trace and the
    average is the one-sided value.
    """
    f_K = np.asarray(f_K, dtype=float)
    n_K = np.asarray(n_K, dtype=float)
    if f_L is None:
        jump = np.sum(f_K * n_K, axis=-1) if vector else f_K[..., None] * n_K
        return jump, f_K
    f_L = np.asarray(f_L, dtype=float)
    diff = f_K - f_L
    jump = np.sum(diff * n_K, axis=-1) if vector else diff[..., None] * n_K
    return jump, 0.5 * (f_K + f_L)
