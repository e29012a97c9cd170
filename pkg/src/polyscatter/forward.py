"""
Physical-optics (Kirchhoff) far field of a convex polygon.

Under the physical-optics approximation only the front cells radiate, and
the far field in direction ``x_hat`` is

    sound-soft:  gamma_t * sum_j (nu_j . d)     * int_{C_j} exp(ik y.(d - x_hat)) ds
    sound-hard:  gamma_t * sum_j (nu_j . x_hat) * int_{C_j} exp(ik y.(d - x_hat)) ds

with ``gamma_t = -2 i k gamma`` and ``gamma = exp(i pi/4) / sqrt(8 pi k)`` in 2D.
The segment integrals have a closed form (a sinc); the trapezoid version is
kept for the inversion cost and as a test oracle.
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Cell, ConvexPolygon, _as_unit, classify_faces


class BoundaryCondition(enum.Enum):
    SOUND_SOFT = "sound-soft"
    SOUND_HARD = "sound-hard"

    @classmethod
    def parse(cls, value) -> "BoundaryCondition":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for bc in cls:
            if key in (bc.value, bc.value.replace("-", ""), bc.name.lower().replace("_", "-")):
                return bc
        raise ValueError(f"unknown boundary condition {value!r}; expected 'sound-soft' or 'sound-hard'")


@dataclass(frozen=True, eq=False)
class IncidentWave:
    """Plane wave ``exp(i k x.d)``."""

    k: float
    d: np.ndarray

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"wavenumber must be positive, got {self.k!r}")
        d = _as_unit(self.d, "d")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def __call__(self, x) -> complex:
        return cmath.exp(1j * self.k * float(np.dot(x, self.d)))

    @property
    def xi(self) -> np.ndarray:
        return self.k * self.d


@dataclass(frozen=True)
class DimensionalConstant:
    gamma: complex
    gamma_tilde: complex


def dimensional_constant(k: float, n: int = 2) -> DimensionalConstant:
    """Far-field constant ``gamma(n, k)`` and ``gamma_t = -2 i k gamma``."""
    if n == 2:
        g = cmath.exp(1j * math.pi / 4) / math.sqrt(8 * math.pi * k)
    elif n == 3:
        g = 1.0 / (4 * math.pi)
    else:
        raise ValueError(f"dimension must be 2 or 3, got {n}")
    return DimensionalConstant(gamma=g, gamma_tilde=-2j * k * g)


def _gamma_tilde_2d(k):
    return dimensional_constant(k, 2).gamma_tilde


def sinc(t):
    """``sin(t)/t`` with the removable singularity filled in.

    A short Taylor series is used for ``|t| < 1e-4``.
    """
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-4
    safe = np.where(small, 1.0, t)
    t2 = t * t
    return np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)


def segment_oscillatory_integral(a, b, k: float, w) -> complex:
    """Exact ``int_a^b exp(i k y.w) ds(y)`` along the straight segment a-b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    e = b - a
    L = math.hypot(e[0], e[1])
    if L == 0.0:
        raise ValueError("segment endpoints coincide")
    m = 0.5 * (a + b)
    return complex(L * cmath.exp(1j * k * float(np.dot(m, w))) * float(sinc(0.5 * k * float(np.dot(e, w)))))


def segment_integrals(a, b, k: float, w) -> np.ndarray:
    """Vectorised closed form: one segment (a, b) against many ``w`` (shape (n, 2)),
    or many segments against one ``w``; arrays broadcast on the leading axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    e = b - a
    L = np.hypot(e[..., 0], e[..., 1])
    m = 0.5 * (a + b)
    return L * np.exp(1j * k * np.sum(m * w, axis=-1)) * sinc(0.5 * k * np.sum(e * w, axis=-1))


def trapezoid_segment_integral(a, b, k: float, w, n_panels: int | None = None, step: float | None = None) -> complex:
    """Composite trapezoid approximation of the segment integral.

    Give either ``n_panels`` or a maximal ``step`` (arc length per panel).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    L = math.hypot(*(b - a))
    if n_panels is None:
        if step is None:
            raise ValueError("give n_panels or step")
        n_panels = max(1, math.ceil(L / step))
    s = np.linspace(0.0, 1.0, n_panels + 1)
    phase = k * (float(np.dot(a, w)) + s * float(np.dot(b - a, w)))
    f = np.exp(1j * phase)
    h = L / n_panels
    return complex(h * (f.sum() - 0.5 * (f[0] + f[-1])))


def reflect(d, nu) -> np.ndarray:
    """Mirror ``d`` across the line through the origin with normal ``nu``."""
    d = np.asarray(d, dtype=float)
    nu = np.asarray(nu, dtype=float)
    return d - 2.0 * float(np.dot(d, nu)) * nu


def reflected_plane_wave(cell: Cell, wave: IncidentWave, x, anchor=None) -> complex:
    """Specular reflection of the incident wave off the line containing ``cell``.

    ``v(x) = exp(ik (x - x0).(Pi d)) * exp(ik x0.d)`` with ``x0`` a point on the
    cell (its midpoint unless ``anchor`` is given) and ``Pi`` the reflection
    across the cell direction. On the cell line ``v`` equals the incident
    wave and the normal derivative of ``u_i + v`` vanishes.
    """
    x0 = cell.midpoint if anchor is None else np.asarray(anchor, dtype=float)
    dr = reflect(wave.d, cell.normal)
    x = np.asarray(x, dtype=float)
    return cmath.exp(1j * wave.k * float(np.dot(x - x0, dr))) * cmath.exp(1j * wave.k * float(np.dot(x0, wave.d)))


def reflected_plane_wave_gradient(cell: Cell, wave: IncidentWave, x, anchor=None) -> np.ndarray:
    dr = reflect(wave.d, cell.normal)
    return 1j * wave.k * dr * reflected_plane_wave(cell, wave, x, anchor)


def _kernel(bc: BoundaryCondition, nu, d, x_hat):
    if bc is BoundaryCondition.SOUND_SOFT:
        return float(np.dot(nu, d))
    return np.asarray(x_hat, dtype=float) @ np.asarray(nu, dtype=float)


def cell_far_field(cell: Cell, wave: IncidentWave, bc: BoundaryCondition, x_hat) -> complex:
    """Contribution of a single cell, as if it were lit."""
    x_hat = np.asarray(x_hat, dtype=float)
    w = wave.d - x_hat
    kern = _kernel(bc, cell.normal, wave.d, x_hat)
    return _gamma_tilde_2d(wave.k) * kern * segment_oscillatory_integral(cell.a, cell.b, wave.k, w)


def po_far_field(poly: ConvexPolygon, wave: IncidentWave, bc: BoundaryCondition, x_hat, n: int = 2) -> complex:
    """Physical-optics far field at one observation direction."""
    if n != 2:
        raise NotImplementedError("only the two-dimensional far field is implemented")
    x_hat = _as_unit(x_hat, "x_hat", tol=1e-10)
    # same arithmetic path as the grid evaluation, so values agree bit for bit
    return complex(po_far_field_directions(poly, wave, bc, x_hat[None, :])[0])


def po_far_field_directions(poly: ConvexPolygon, wave: IncidentWave, bc: BoundaryCondition, x_hat) -> np.ndarray:
    """Vectorised far field at many directions ``x_hat`` (shape (n, 2))."""
    bc = BoundaryCondition.parse(bc)
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    front, _ = classify_faces(poly, wave.d)
    w = wave.d[None, :] - x_hat
    total = np.zeros(len(x_hat), dtype=complex)
    for c in front:
        kern = _kernel(bc, c.normal, wave.d, x_hat)
        total += kern * segment_integrals(c.a, c.b, wave.k, w)
    return _gamma_tilde_2d(wave.k) * total


def grid_angles(n_angles: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_angles) / n_angles


@dataclass(frozen=True, eq=False)
class FarFieldGrid:
    """Far-field samples on the equidistant grid ``theta_i = 2 pi i / n``."""

    values: np.ndarray
    k: float
    d: np.ndarray
    bc: BoundaryCondition

    def __post_init__(self):
        v = np.array(self.values, dtype=complex).reshape(-1)
        v.setflags(write=False)
        d = np.array(self.d, dtype=float).reshape(2)
        d.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "bc", BoundaryCondition.parse(self.bc))

    @property
    def n_angles(self) -> int:
        return len(self.values)

    @property
    def angles(self) -> np.ndarray:
        return grid_angles(self.n_angles)

    @property
    def directions(self) -> np.ndarray:
        a = self.angles
        return np.column_stack([np.cos(a), np.sin(a)])

    def with_values(self, values) -> "FarFieldGrid":
        return FarFieldGrid(values=values, k=self.k, d=self.d, bc=self.bc)


def po_far_field_grid(poly: ConvexPolygon, wave: IncidentWave, bc: BoundaryCondition, n_angles: int = 360) -> FarFieldGrid:
    if n_angles < 8:
        raise ValueError(f"n_angles must be at least 8, got {n_angles}")
    bc = BoundaryCondition.parse(bc)
    a = grid_angles(n_angles)
    xh = np.column_stack([np.cos(a), np.sin(a)])
    return FarFieldGrid(values=po_far_field_directions(poly, wave, bc, xh), k=wave.k, d=wave.d, bc=bc)
