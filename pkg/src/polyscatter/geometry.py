"""
Convex polygon geometry: cells, face classification, admissibility and
reconstruction of a polygon from outward normals and support distances.

A polygon is stored counterclockwise. Cell ``j`` is the open side running
from vertex ``j`` to vertex ``j + 1`` (indices wrap), with constant outward
unit normal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

# relative tolerance used for convexity / collinearity decisions
_EPS = 1e-12


class GeometryError(ValueError):
    """Invalid or degenerate polygon input."""


class ReconstructionError(GeometryError):
    """Half-plane data does not define a valid convex polygon.

    ``index`` names the offending normal / vertex when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _as_unit(v, name="vector", tol=1e-12):
    v = np.asarray(v, dtype=float).reshape(2)
    n = math.hypot(v[0], v[1])
    if abs(n - 1.0) > tol:
        raise GeometryError(f"{name} must have unit length, got |{name}| = {float(n)!r}")
    return v


def unit(v) -> np.ndarray:
    """Return ``v / |v|`` as a float array of shape (2,)."""
    v = np.asarray(v, dtype=float).reshape(2)
    n = math.hypot(v[0], v[1])
    if n == 0.0:
        raise GeometryError("cannot normalise the zero vector")
    return v / n


def direction(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def angle_of(v) -> float:
    """Polar angle of ``v`` in [0, 2*pi)."""
    return math.atan2(v[1], v[0]) % (2.0 * math.pi)


def outward_normal(a, b) -> np.ndarray:
    """Outward unit normal of the counterclockwise edge a -> b."""
    e = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return unit((e[1], -e[0]))


@dataclass(frozen=True, eq=False)
class Cell:
    """One open side of a polygon with its outward unit normal."""

    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray
    length: float
    index: int

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)

    @property
    def tangent(self) -> np.ndarray:
        return (self.b - self.a) / self.length


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Strictly convex polygon with counterclockwise vertices.

    Clockwise input is reversed with a warning. Collinear triples, repeated
    vertices and reflex corners raise :class:`GeometryError`.
    """

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError(f"need an (m, 2) vertex array with m >= 3, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertices must be finite")
        if _signed_area(v) < 0:
            warnings.warn("polygon vertices given clockwise; reversing to counterclockwise", stacklevel=3)
            v = v[::-1].copy()
        m = len(v)
        scale = max(1.0, float(np.max(np.abs(v))))
        for i in range(m):
            e0 = v[i] - v[i - 1]
            e1 = v[(i + 1) % m] - v[i]
            if math.hypot(*e1) <= _EPS * scale:
                raise GeometryError(f"repeated vertex at index {(i + 1) % m}")
            cross = e0[0] * e1[1] - e0[1] * e1[0]
            if cross <= _EPS * scale * scale:
                kind = "collinear" if abs(cross) <= _EPS * scale * scale else "reflex"
                raise GeometryError(f"degenerate polygon: {kind} corner at vertex {i} {tuple(v[i])}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self):
        return len(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        """Area centroid."""
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cr = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        area = 0.5 * cr.sum()
        return np.array([((v[:, 0] + w[:, 0]) * cr).sum(), ((v[:, 1] + w[:, 1]) * cr).sum()]) / (6.0 * area)

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def diameter(self) -> float:
        v = self.vertices
        return max(float(np.hypot(*(p - q))) for p, q in combinations(v, 2))

    def normals(self) -> np.ndarray:
        return np.array([c.normal for c in cells(self)])

    def support_distances(self, x0) -> np.ndarray:
        """Distances ``<x - x0, nu_j>`` of every cell line from ``x0``."""
        x0 = np.asarray(x0, dtype=float)
        return np.array([float(np.dot(c.a - x0, c.normal)) for c in cells(self)])

    def contains(self, p, strict=True) -> bool:
        d = self.support_distances(p)
        return bool(np.all(d > 0) if strict else np.all(d >= 0))

    def boundary_samples(self, per_edge: int) -> np.ndarray:
        """Points sampled uniformly along every edge (endpoints included once)."""
        s = np.arange(per_edge) / per_edge
        pts = [c.a + np.outer(s, c.b - c.a) for c in cells(self)]
        return np.vstack(pts)


def _signed_area(v) -> float:
    w = np.roll(v, -1, axis=0)
    return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))


def cells(poly: ConvexPolygon) -> list[Cell]:
    """The m sides of ``poly`` in counterclockwise order."""
    v = poly.vertices
    m = len(v)
    out = []
    for j in range(m):
        a = v[j].copy()
        b = v[(j + 1) % m].copy()
        out.append(Cell(a=a, b=b, normal=outward_normal(a, b), length=float(np.hypot(*(b - a))), index=j))
    return out


GRAZING_TOL = 1e-12


def classify_faces(poly: ConvexPolygon, d, grazing_tol: float = GRAZING_TOL) -> tuple[list[Cell], list[Cell]]:
    """Split the cells into (front, back) with respect to incident direction ``d``.

    Front cells have ``nu . d < 0``. Grazing cells (``nu . d == 0``) are back
    cells, since the back face is defined by ``nu . d >= 0``. ``|nu . d|`` up to
    ``grazing_tol`` counts as grazing so that directions such as
    ``(cos(3 pi/2), sin(3 pi/2))`` do not light a side edge-on.
    """
    d = _as_unit(d, "d")
    front, back = [], []
    for c in cells(poly):
        (front if float(np.dot(c.normal, d)) < -grazing_tol else back).append(c)
    return front, back


@dataclass(frozen=True)
class AdmissibilityThresholds:
    """Constants for the high-frequency admissibility test.

    The asymptotics only ask for ``k * diam >> 1``; the numeric threshold is
    a project choice.
    """

    k_diam_min: float = 10.0
    h0: float = 0.1
    h1: float = math.radians(10.0)
    h2: float = math.radians(175.0)


@dataclass(frozen=True)
class AdmissibilityReport:
    k_diam: float
    min_cell_len: float
    min_angle: float
    max_angle: float
    thresholds: AdmissibilityThresholds = field(default_factory=AdmissibilityThresholds)

    @property
    def passed(self) -> bool:
        t = self.thresholds
        return (
            self.k_diam >= t.k_diam_min
            and self.min_cell_len >= t.h0
            and t.h1 <= self.min_angle
            and self.max_angle <= t.h2
        )


def _angle_between(u, v) -> float:
    c = float(np.clip(np.dot(u, v), -1.0, 1.0))
    s = float(u[0] * v[1] - u[1] * v[0])
    return abs(math.atan2(s, c))


def check_admissibility(poly: ConvexPolygon, k: float, thresholds: AdmissibilityThresholds | None = None) -> AdmissibilityReport:
    if k <= 0:
        raise ValueError("wavenumber must be positive")
    thresholds = thresholds or AdmissibilityThresholds()
    cs = cells(poly)
    angles = [_angle_between(p.normal, q.normal) for p, q in combinations(cs, 2)]
    return AdmissibilityReport(
        k_diam=k * poly.diameter,
        min_cell_len=min(c.length for c in cs),
        min_angle=min(angles),
        max_angle=max(angles),
        thresholds=thresholds,
    )


def halfplane_vertices(x0, normals, distances) -> np.ndarray:
    """Vertices ``K_j`` where line j meets line j+1 (wrapping).

    Line j is ``<x - x0, nu_j> = l_j``. Cell j then runs from ``K_{j-1}`` to
    ``K_j``. Only the 2x2 solves are done here; see
    :func:`reconstruct_from_halfplanes` for the validity checks.
    """
    x0 = np.asarray(x0, dtype=float).reshape(2)
    nu = np.asarray(normals, dtype=float).reshape(-1, 2)
    l = np.asarray(distances, dtype=float).reshape(-1)
    nxt = np.roll(nu, -1, axis=0)
    lnxt = np.roll(l, -1)
    det = nu[:, 0] * nxt[:, 1] - nu[:, 1] * nxt[:, 0]
    bad = np.flatnonzero(np.abs(det) < 1e-12)
    if bad.size:
        j = int(bad[0])
        raise ReconstructionError(f"normals {j} and {(j + 1) % len(nu)} are parallel; lines do not intersect", index=j)
    # Cramer's rule for [nu_j; nu_j+1] y = [l_j; l_j+1]
    y0 = (l * nxt[:, 1] - lnxt * nu[:, 1]) / det
    y1 = (nu[:, 0] * lnxt - nxt[:, 0] * l) / det
    return x0 + np.column_stack([y0, y1])


def reconstruct_from_halfplanes(x0, normals, distances) -> ConvexPolygon:
    """Build the convex polygon ``{x : <x - x0, nu_j> <= l_j}``.

    ``normals`` must be sorted counterclockwise by polar angle and every
    consecutive gap must be below pi. Each ``l_j`` must be positive so that
    ``x0`` lies strictly inside. Raises :class:`ReconstructionError` if any
    cell comes out inverted (the distances are inconsistent).
    """
    nu = np.asarray(normals, dtype=float).reshape(-1, 2)
    l = np.asarray(distances, dtype=float).reshape(-1)
    m = len(nu)
    if m < 3 or len(l) != m:
        raise ReconstructionError(f"need m >= 3 normals and as many distances, got {m} and {len(l)}")
    if np.any(l <= 0):
        j = int(np.flatnonzero(l <= 0)[0])
        raise ReconstructionError(f"distance {j} is not positive ({float(l[j])!r})", index=j)
    ang = np.arctan2(nu[:, 1], nu[:, 0])
    gaps = (np.roll(ang, -1) - ang) % (2 * math.pi)
    if not math.isclose(gaps.sum(), 2 * math.pi, rel_tol=1e-9):
        raise ReconstructionError("normals are not sorted counterclockwise")
    if np.any(gaps >= math.pi):
        j = int(np.argmax(gaps))
        raise ReconstructionError(f"gap after normal {j} is >= pi; half-planes are unbounded", index=j)
    K = halfplane_vertices(x0, nu, l)
    tangents = np.column_stack([-nu[:, 1], nu[:, 0]])
    seg = K - np.roll(K, 1, axis=0)  # cell j: K_{j-1} -> K_j
    along = np.einsum("ij,ij->i", seg, tangents)
    if np.any(along <= 0):
        j = int(np.flatnonzero(along <= 0)[0])
        raise ReconstructionError(f"cell {j} is inverted; vertex {j} lies outside the neighbouring half-planes", index=j)
    return ConvexPolygon(np.roll(K, 1, axis=0))
