"""
Processing of sampled far-field data: multiplicative noise, Fourier
low-pass filtering and detection of local maxima of ``|u_inf|^2`` in the
backscattering aperture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forward import FarFieldGrid
from .geometry import GRAZING_TOL


@dataclass(frozen=True)
class NoiseSpec:
    delta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"noise level must be non-negative, got {self.delta!r}")


def _uniform_pair(seed: int, index: int) -> tuple[float, float]:
    # counter-based: the stream depends only on (seed, index)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(index),)))
    r = 2.0 * rng.random(2) - 1.0
    return float(r[0]), float(r[1])


def noise_draws(seed: int, n: int) -> np.ndarray:
    """The (r1, r2) pairs used for samples ``0..n-1``, shape (n, 2)."""
    return np.array([_uniform_pair(seed, i) for i in range(n)])


def add_noise(grid: FarFieldGrid, spec: NoiseSpec) -> FarFieldGrid:
    """Perturb every sample as ``u + delta * r1 * |u| * exp(i pi r2)``.

    ``r1`` and ``r2`` are uniform on [-1, 1] and derived from
    ``(spec.seed, sample index)`` only, so the result does not depend on the
    evaluation order.
    """
    if spec.delta == 0:
        return grid
    u = grid.values
    r = noise_draws(spec.seed, len(u))
    noisy = u + spec.delta * r[:, 0] * np.abs(u) * np.exp(1j * np.pi * r[:, 1])
    return grid.with_values(noisy)


def default_cutoff(k: float, scene_radius: float, n_angles: int) -> int:
    """``ceil(1.5 k R)`` clipped to the Nyquist index."""
    return int(min(math.ceil(1.5 * k * scene_radius), n_angles // 2))


def fourier_filter(grid: FarFieldGrid, cutoff: int, center=None) -> FarFieldGrid:
    """Zero every angular Fourier mode with ``|f| > cutoff``.

    With ``center`` given, the samples are first multiplied by
    ``exp(ik x_hat . center)``, which moves the phase reference to that
    point and narrows the angular bandwidth of an obstacle sitting there;
    the factor is removed again afterwards.
    """
    n = grid.n_angles
    if cutoff < 0 or cutoff > n // 2:
        raise ValueError(f"cutoff must lie in [0, {n // 2}], got {cutoff}")
    u = np.asarray(grid.values)
    shift = None
    if center is not None:
        shift = np.exp(1j * grid.k * (grid.directions @ np.asarray(center, dtype=float)))
        u = u * shift
    coef = np.fft.fft(u)
    freq = np.fft.fftfreq(n, d=1.0 / n)
    coef[np.abs(freq) > cutoff] = 0.0
    out = np.fft.ifft(coef)
    if shift is not None:
        out = out / shift
    return grid.with_values(out)


@dataclass(frozen=True)
class Peak:
    index: int
    angle: float
    power: float

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])


@dataclass(frozen=True, eq=False)
class PeakSet:
    """Local maxima of ``|u_inf|^2`` with ``x_hat . d < 0``, strongest first."""

    peaks: tuple[Peak, ...]
    d: np.ndarray
    median_power: float

    def __len__(self):
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)

    @property
    def indices(self) -> list[int]:
        return [p.index for p in self.peaks]


def backscatter_mask(grid: FarFieldGrid, tol: float = GRAZING_TOL) -> np.ndarray:
    """Samples with ``x_hat . d < 0``.

    Directions on the equator are excluded even when rounding leaves a
    residue of order 1e-16 (e.g. 270 degrees against ``d = (1, 0)``).
    """
    return grid.directions @ grid.d < -tol


def detect_backscatter_peaks(grid: FarFieldGrid, window: int = 5, prominence: float = 2.0) -> PeakSet:
    """Find backscattering local maxima of the phaseless data.

    A sample qualifies if it lies in the open half ``x_hat . d < 0``, its
    power is >= every sample within ``window`` steps on either side (the
    grid is circular, neighbours outside the aperture count too) and it is
    at least ``prominence`` times the median power over the aperture. Of a
    flat top only the first index is kept.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if prominence < 0:
        raise ValueError("prominence must be non-negative")
    n = grid.n_angles
    if n == 0:
        raise ValueError("empty grid")
    power = np.abs(grid.values) ** 2
    mask = backscatter_mask(grid)
    if not mask.any():
        raise ValueError("backscattering aperture contains no samples")
    med = float(np.median(power[mask]))
    offsets = np.arange(-window, window + 1)
    neigh = power[(np.arange(n)[:, None] + offsets[None, :]) % n]
    is_max = power >= neigh.max(axis=1)
    # flat tops: drop a sample if an equal sample sits just before it
    is_max &= ~(power == neigh[:, window - 1])
    found = np.flatnonzero(mask & is_max & (power >= prominence * med))
    angles = grid.angles
    peaks = sorted((Peak(int(i), float(angles[i]), float(power[i])) for i in found), key=lambda p: (-p.power, p.angle))
    return PeakSet(peaks=tuple(peaks), d=np.array(grid.d), median_power=med)
