"""
Two-stage recovery.

Stage 1 turns each (incident direction, backscattering peak) pair into an
outward normal by inverting the mirror law ``x_hat = d - 2 (d . nu) nu``,
then merges nearly parallel normals coming from different incident waves.

Stage 2 fixes the support distances ``l_j`` of the sides from a location
point ``x0`` by a derivative-free least-squares fit of single-cell
physical-optics far fields to the measured (phased) peak values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .forward import BoundaryCondition, dimensional_constant
from .geometry import ConvexPolygon, ReconstructionError, angle_of, halfplane_vertices, reconstruct_from_halfplanes

log = logging.getLogger(__name__)


class DegenerateDirectionError(ValueError):
    pass


def critical_direction(d, nu) -> np.ndarray:
    """Specular observation direction of the side with normal ``nu``."""
    d = np.asarray(d, dtype=float)
    nu = np.asarray(nu, dtype=float)
    dn = float(np.dot(d, nu))
    if dn >= 0:
        raise ValueError(f"not a front normal: d . nu = {float(dn)!r} >= 0")
    return d - 2.0 * dn * nu


def normal_from_critical(d, x_hat) -> np.ndarray:
    """Outward normal ``(x_hat - d) / sqrt(2 (1 - x_hat . d))``."""
    d = np.asarray(d, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    q = 2.0 * (1.0 - float(np.dot(x_hat, d)))
    diff = x_hat - d
    if q <= 1e-24 or not np.any(diff):
        raise DegenerateDirectionError("degenerate: forward direction (x_hat == d)")
    nu = diff / math.sqrt(q)
    # |x_hat - d|^2 == q only up to rounding; renormalise
    return nu / math.hypot(nu[0], nu[1])


@dataclass(frozen=True, eq=False)
class CriticalPair:
    """A detected peak together with the normal it implies."""

    d: np.ndarray
    x_hat: np.ndarray
    magnitude: float
    nu: np.ndarray
    source: int = 0  # incident-direction label, used for ordering only
    peak_index: int = -1

    @classmethod
    def from_peak(cls, d, x_hat, magnitude, source=0, peak_index=-1) -> "CriticalPair":
        d = np.asarray(d, dtype=float)
        x_hat = np.asarray(x_hat, dtype=float)
        return cls(d=d, x_hat=x_hat, magnitude=float(magnitude), nu=normal_from_critical(d, x_hat),
                   source=int(source), peak_index=int(peak_index))

    @property
    def normal_angle(self) -> float:
        return angle_of(self.nu)


def pair_order_key(p: CriticalPair):
    return (-p.magnitude, angle_of(p.x_hat), p.source)


@dataclass(frozen=True, eq=False)
class EffectiveNormal:
    normal: np.ndarray
    pair: CriticalPair
    members: tuple[CriticalPair, ...]

    @property
    def angle(self) -> float:
        return angle_of(self.normal)


@dataclass(frozen=True, eq=False)
class EffectiveNormalSet:
    """Effective normals sorted counterclockwise by polar angle."""

    normals: tuple[EffectiveNormal, ...] = ()

    def __len__(self):
        return len(self.normals)

    def __iter__(self):
        return iter(self.normals)

    def __getitem__(self, i):
        return self.normals[i]

    def vectors(self) -> np.ndarray:
        return np.array([e.normal for e in self.normals]).reshape(-1, 2)

    def strongest(self, m: int) -> "EffectiveNormalSet":
        """Keep the ``m`` clusters whose representatives have the largest peaks."""
        keep = sorted(self.normals, key=lambda e: pair_order_key(e.pair))[:m]
        return EffectiveNormalSet(tuple(sorted(keep, key=lambda e: e.angle)))


def _angdiff(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def group_effective_normals(pairs, angle_tol: float) -> EffectiveNormalSet:
    """Greedy clustering of implied normals.

    Pairs are visited strongest first; a pair joins the first cluster whose
    representative normal is within ``angle_tol`` of its own, otherwise it
    opens a new cluster. The representative is therefore always the
    strongest member.
    """
    if angle_tol <= 0:
        raise ValueError("angle_tol must be positive")
    clusters: list[list[CriticalPair]] = []
    for p in sorted(pairs, key=pair_order_key):
        a = p.normal_angle
        for c in clusters:
            if _angdiff(a, c[0].normal_angle) <= angle_tol:
                c.append(p)
                break
        else:
            clusters.append([p])
    eff = [EffectiveNormal(normal=c[0].nu, pair=c[0], members=tuple(c)) for c in clusters]
    return EffectiveNormalSet(tuple(sorted(eff, key=lambda e: e.angle)))


def select_normals(normal_set: EffectiveNormalSet, m: int | None = None, min_relative: float = 0.1) -> EffectiveNormalSet:
    """Pick the sides to reconstruct.

    With ``m`` given, the ``m`` strongest clusters are kept. Otherwise every
    cluster whose representative peak reaches ``min_relative`` times the
    strongest one is kept; sidelobe clusters sit far below that.
    """
    if m is not None:
        return normal_set.strongest(m)
    if len(normal_set) == 0:
        return normal_set
    top = max(e.pair.magnitude for e in normal_set)
    keep = [e for e in normal_set if e.pair.magnitude >= min_relative * top]
    return EffectiveNormalSet(tuple(keep))


def default_quadrature_step(k: float) -> float:
    """One twentieth of a wavelength."""
    return math.pi / (10.0 * k)


@dataclass(frozen=True, eq=False)
class InversionProblem:
    """Least-squares fit of side distances ``t = (l_1, ..., l_m)``.

    ``pairs`` are the selected peaks, strongest first, and ``cell_of[b]`` is
    the index into ``normals`` of the side behind ``pairs[b]``. The fit uses
    observations ``(obs_d[i], obs_x_hat[i]) -> data[i]`` on side
    ``obs_cell[i]``; the first ``len(pairs)`` observations are the selected
    peaks themselves, any further ones are grid samples next to them.
    """

    x0: np.ndarray
    normals: np.ndarray
    pairs: tuple[CriticalPair, ...]
    cell_of: tuple[int, ...]
    data: np.ndarray
    k: float
    bc: BoundaryCondition = BoundaryCondition.SOUND_SOFT
    quad_step: float | None = None
    obs_d: np.ndarray | None = None
    obs_x_hat: np.ndarray | None = None
    obs_cell: np.ndarray | None = None
    penalty_factor: float = 1e6

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "x0", np.asarray(self.x0, dtype=float).reshape(2))
        set_(self, "normals", np.asarray(self.normals, dtype=float).reshape(-1, 2))
        set_(self, "data", np.asarray(self.data, dtype=complex).reshape(-1))
        set_(self, "bc", BoundaryCondition.parse(self.bc))
        set_(self, "pairs", tuple(self.pairs))
        set_(self, "cell_of", tuple(int(j) for j in self.cell_of))
        if self.quad_step is None:
            set_(self, "quad_step", default_quadrature_step(self.k))
        if len(self.pairs) != len(self.cell_of):
            raise ValueError("pairs and cell_of must have equal length")
        if self.obs_d is None:
            set_(self, "obs_d", np.array([p.d for p in self.pairs]).reshape(-1, 2))
            set_(self, "obs_x_hat", np.array([p.x_hat for p in self.pairs]).reshape(-1, 2))
            set_(self, "obs_cell", np.array(self.cell_of, dtype=int))
        else:
            set_(self, "obs_d", np.asarray(self.obs_d, dtype=float).reshape(-1, 2))
            set_(self, "obs_x_hat", np.asarray(self.obs_x_hat, dtype=float).reshape(-1, 2))
            set_(self, "obs_cell", np.asarray(self.obs_cell, dtype=int).reshape(-1))
        n = len(self.data)
        if not (len(self.obs_d) == len(self.obs_x_hat) == len(self.obs_cell) == n) or n < len(self.pairs):
            raise ValueError("observation arrays and data must have equal length")
        if np.any(self.obs_cell < 0) or np.any(self.obs_cell >= max(self.m, 1)):
            raise ValueError("observation cell index out of range")

    @property
    def m(self) -> int:
        return len(self.normals)

    @property
    def wavelength(self) -> float:
        return 2 * math.pi / self.k

    @property
    def data_energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))

    @property
    def penalty(self) -> float:
        return self.penalty_factor * max(self.data_energy, 1.0)

    def kernels(self) -> np.ndarray:
        nu = self.normals[self.obs_cell]
        other = self.obs_d if self.bc is BoundaryCondition.SOUND_SOFT else self.obs_x_hat
        return np.einsum("ij,ij->i", nu, other)


def assemble_problem(x0, normal_set: EffectiveNormalSet, grids, k: float, bc=BoundaryCondition.SOUND_SOFT,
                     neighbors: int = 0, quad_step: float | None = None) -> InversionProblem:
    """Build the fit from each side's representative peak.

    ``grids`` maps ``CriticalPair.source`` to the (filtered) far-field grid the
    peak was found on. With ``neighbors = q > 0`` the ``q`` grid samples on
    either side of every selected peak are fitted as well.
    """
    order = sorted(range(len(normal_set)), key=lambda j: pair_order_key(normal_set[j].pair))
    pairs = tuple(normal_set[j].pair for j in order)
    obs = []  # (d, x_hat, cell, value)
    for p, j in zip(pairs, order):
        g = grids[p.source]
        obs.append((p.d, p.x_hat, j, g.values[p.peak_index]))
    for p, j in zip(pairs, order):
        g = grids[p.source]
        dirs = g.directions
        for off in [o for q in range(1, neighbors + 1) for o in (-q, q)]:
            i = (p.peak_index + off) % g.n_angles
            obs.append((p.d, dirs[i], j, g.values[i]))
    return InversionProblem(
        x0=x0,
        normals=normal_set.vectors(),
        pairs=pairs,
        cell_of=tuple(order),
        data=np.array([o[3] for o in obs], dtype=complex),
        k=k,
        bc=bc,
        quad_step=quad_step,
        obs_d=np.array([o[0] for o in obs]),
        obs_x_hat=np.array([o[1] for o in obs]),
        obs_cell=np.array([o[2] for o in obs], dtype=int),
    )


def cell_endpoints(problem: InversionProblem, t, check=True):
    """Endpoints ``(a_j, b_j)`` of every side for distances ``t``.

    With ``check`` an infeasible ``t`` raises :class:`ReconstructionError`.
    """
    if check:
        reconstruct_from_halfplanes(problem.x0, problem.normals, t)
    K = halfplane_vertices(problem.x0, problem.normals, t)
    return np.roll(K, 1, axis=0), K


def _model_from_endpoints(problem: InversionProblem, a, b) -> np.ndarray:
    k = problem.k
    gt = dimensional_constant(k, 2).gamma_tilde
    w = problem.obs_d - problem.obs_x_hat
    out = np.empty(len(w), dtype=complex)
    for j in np.unique(problem.obs_cell):
        sel = np.flatnonzero(problem.obs_cell == j)
        e = b[j] - a[j]
        L = math.hypot(e[0], e[1])
        n = max(1, math.ceil(L / problem.quad_step))
        s = np.linspace(0.0, 1.0, n + 1)
        nodes = a[j][None, :] + s[:, None] * e[None, :]
        weights = np.full(n + 1, L / n)
        weights[[0, -1]] *= 0.5
        out[sel] = weights @ np.exp(1j * k * (nodes @ w[sel].T))
    return gt * problem.kernels() * out


def model_values(problem: InversionProblem, t) -> np.ndarray:
    """Single-side model far field (trapezoid rule) at every observation."""
    a, b = cell_endpoints(problem, t)
    return _model_from_endpoints(problem, a, b)


def cost_F(problem: InversionProblem, t) -> float:
    """Sum of squared residuals between data and single-side model values.

    Infeasible ``t`` (a non-positive entry, an inverted side) returns
    ``problem.penalty``, i.e. ``1e6`` times the data energy, instead of
    raising, so a derivative-free search can back out of it.
    """
    if len(problem.data) == 0:
        return 0.0
    t = np.asarray(t, dtype=float)
    if t.shape != (problem.m,) or not np.all(np.isfinite(t)):
        raise ValueError(f"t must be a finite vector of length {problem.m}")
    try:
        r = problem.data - model_values(problem, t)
    except ReconstructionError:
        return problem.penalty
    return float(np.sum(r.real**2 + r.imag**2))


def lengths_matrix(normals) -> np.ndarray:
    """Matrix ``A`` with side lengths ``L = A t`` for a polygon with fixed normals.

    Translations ``t -> t + N s`` lie in its null space.
    """
    nu = np.asarray(normals, dtype=float)
    tau = np.column_stack([-nu[:, 1], nu[:, 0]])
    cols = []
    for e in np.eye(len(nu)):
        K = halfplane_vertices((0.0, 0.0), nu, e)
        cols.append(np.einsum("ij,ij->i", K - np.roll(K, 1, axis=0), tau))
    return np.column_stack(cols)


def shape_from_magnitudes(problem: InversionProblem, iterations: int = 3) -> np.ndarray:
    """Distances reproducing the measured peak moduli, up to a translation.

    Uses only the selected peaks. The model modulus of side j is
    ``|gamma_t| |kernel| L_j |sinc|``; the target lengths are refreshed a few
    times with the sinc factor of the current shape.
    """
    A = lengths_matrix(problem.normals)
    gt = abs(dimensional_constant(problem.k, 2).gamma_tilde)
    nsel = len(problem.pairs)
    kern = np.abs(problem.kernels()[:nsel])
    cells_ = problem.obs_cell[:nsel]
    w = (problem.obs_d - problem.obs_x_hat)[:nsel]
    target = np.abs(problem.data[:nsel]) / (gt * np.maximum(kern, 1e-12))
    corr = np.ones(nsel)
    t = None
    for _ in range(iterations):
        L = np.full(problem.m, np.nan)
        for b_, j in enumerate(cells_):
            val = target[b_] / corr[b_]
            L[j] = val if np.isnan(L[j]) else max(L[j], val)
        ok = ~np.isnan(L)
        t, *_ = np.linalg.lstsq(A[ok], L[ok], rcond=None)
        a, b = cell_endpoints(problem, t, check=False)
        e = (b - a)[cells_]
        corr = np.maximum(np.abs(np.sinc(problem.k * np.einsum("ij,ij->i", e, w) / (2 * np.pi))), 0.2)
    return t


def translation_scan(problem: InversionProblem, t_shape, scales=(1.0,), step: float | None = None,
                     l_min: float = 1e-3, l_max: float = np.inf, n_best: int = 5,
                     n_refine: int = 20) -> list[np.ndarray]:
    """Candidate distance vectors from a search over scaled translates of a shape.

    Candidates have the form ``c * t_shape + N s``: the shape scaled by
    ``c`` about ``x0`` and translated by ``s``. Translating every side by
    ``s`` multiplies each model value by ``exp(ik s . (d - x_hat))`` exactly,
    so for each factor in ``scales`` the cost is tabulated cheaply on a grid
    of translations. The ``n_refine`` best grid points per factor are then
    polished by successively finer local searches in ``(c, s)``; the basins
    are narrower than a grid step. Returns up to ``n_best`` candidates,
    lowest cost first, pairwise at least an eighth of a wavelength apart.
    """
    lam = problem.wavelength
    step = step or lam / 12
    t_shape = np.asarray(t_shape, dtype=float)
    w = problem.obs_d - problem.obs_x_hat
    nu = problem.normals
    tau = np.column_stack([-nu[:, 1], nu[:, 0]])
    k = problem.k
    offs = np.stack(np.meshgrid(np.arange(-2, 3), np.arange(-2, 3), indexing="ij"), axis=-1).reshape(-1, 2)

    def base_model(c):
        a, b = cell_endpoints(problem, c * t_shape, check=False)
        if np.any(np.einsum("ij,ij->i", b - a, tau) <= 0):
            return None, b
        return _model_from_endpoints(problem, a, b), b

    def cost(c, base, S):
        S = np.asarray(S).reshape(-1, 2)
        T = c * t_shape[None, :] + S @ nu.T
        F = np.full(len(S), np.inf)
        ok = np.flatnonzero(np.all((T >= l_min) & (T <= l_max), axis=1))
        for i0 in range(0, len(ok), 4096):
            idx = ok[i0:i0 + 4096]
            r = problem.data[None, :] - base[None, :] * np.exp(1j * k * (S[idx] @ w.T))
            F[idx] = np.sum(r.real**2 + r.imag**2, axis=1)
        return F

    scales = sorted(float(c) for c in scales)
    hc = min(np.diff(scales)) if len(scales) > 1 else 0.01
    cand = []
    for c in scales:
        base, b = base_model(c)
        if base is None:
            continue
        rel = b - problem.x0
        lo, hi = -rel.max(axis=0), -rel.min(axis=0)
        xs = np.arange(lo[0], hi[0] + step, step)
        ys = np.arange(lo[1], hi[1] + step, step)
        S = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        F = cost(c, base, S)
        picked = []
        for i in np.argsort(F, kind="stable"):
            if not np.isfinite(F[i]) or len(picked) >= n_refine:
                break
            if all(np.max(np.abs(S[i] - S[p])) > 1.5 * step for p in picked):
                picked.append(i)
        for i in picked:
            cc, s, f = c, S[i], F[i]
            h, dc = step, hc
            for _ in range(5):
                h /= 2.5
                dc /= 2.5
                for c_try in (cc - dc, cc, cc + dc):
                    bt, _ = base_model(c_try)
                    if bt is None:
                        continue
                    trial = s + h * offs
                    Ft = cost(c_try, bt, trial)
                    q = int(np.argmin(Ft))
                    if Ft[q] < f:
                        cc_new, s_new, f = c_try, trial[q], Ft[q]
                        cc, s = cc_new, s_new
            cand.append((float(f), cc, cc * t_shape + nu @ s))
    cand.sort(key=lambda x: (x[0], x[1]))
    out = []
    for _, _, t in cand:
        if all(np.max(np.abs(t - u)) > lam / 8 for u in out):
            out.append(t)
        if len(out) >= n_best:
            break
    return out


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings for :func:`minimize_distances`.

    ``method``: ``"trust-region"`` (quadratic-model trust region) or
    ``"nelder-mead"``. ``strategy``: ``"scan"`` seeds local searches from
    :func:`translation_scan` in addition to the initial guess; ``"local"``
    runs a single local search from the initial guess. ``max_evals`` is per
    local search. Radii are lengths; ``None`` means a fraction of the
    wavelength.
    """

    method: str = "trust-region"
    strategy: str = "scan"
    max_evals: int = 1000
    l_min: float = 1e-3
    l_max: float = 10.0
    initial_radius: float | None = None
    final_radius: float = 1e-7
    n_starts: int = 8
    scan_scales: tuple[float, ...] = tuple(np.round(np.arange(0.94, 1.0601, 0.01), 2))


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    distances: np.ndarray
    polygon: ConvexPolygon | None
    cost: float
    evaluations: int
    iterations: int
    converged: bool
    message: str = ""
    final_radius: float = float("nan")
    history: tuple[float, ...] = field(default=(), repr=False)
    initial: np.ndarray | None = None
    starts: int = 1


@dataclass
class LocalResult:
    x: np.ndarray
    fun: float
    nfev: int
    nit: int
    converged: bool
    message: str
    final_radius: float


def local_minimize(fun, x_init, bounds, method="trust-region", max_evals=1000, initial_radius=0.05,
                   final_radius=1e-7) -> LocalResult:
    """One bound-constrained derivative-free local search.

    ``"trust-region"`` is scipy's COBYQA, a trust-region method built on
    quadratic interpolation models; ``"nelder-mead"`` is the simplex method.
    """
    x_init = np.asarray(x_init, dtype=float)
    method = method.lower()
    if method in ("trust-region", "cobyqa"):
        res = minimize(fun, x_init, method="COBYQA", bounds=bounds,
                       options={"maxfev": max_evals, "initial_tr_radius": initial_radius,
                                "final_tr_radius": final_radius})
        ok = res.status in (0, 1)
        return LocalResult(np.asarray(res.x), float(res.fun), int(res.nfev), int(getattr(res, "nit", 0)), ok,
                           str(res.message), final_radius if ok else float("nan"))
    if method == "nelder-mead":
        simplex = np.vstack([x_init] + [x_init + initial_radius * e for e in np.eye(len(x_init))])
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        simplex = np.clip(simplex, lo, hi)
        res = minimize(fun, x_init, method="Nelder-Mead", bounds=bounds,
                       options={"maxfev": max_evals, "initial_simplex": simplex, "xatol": final_radius,
                                "fatol": 0.0})
        return LocalResult(np.asarray(res.x), float(res.fun), int(res.nfev), int(res.nit), bool(res.success),
                           str(res.message), float("nan"))
    raise ValueError(f"unknown optimizer method {method!r}")


class _Tracker:
    """Wraps the cost to keep the best point seen; that point is reported."""

    def __init__(self, fun):
        self.fun = fun
        self.best_x = None
        self.best_f = math.inf
        self.history: list[float] = []

    def __call__(self, x):
        x = np.array(x, dtype=float)
        f = self.fun(x)
        if f < self.best_f:
            self.best_f = f
            self.best_x = x
        self.history.append(self.best_f)
        return f


def minimize_distances(problem: InversionProblem, initial, options: OptimizerOptions | None = None) -> ReconstructionResult:
    """Minimise :func:`cost_F` over box-bounded distances.

    The returned distances are the best evaluated point, so the reported
    cost never exceeds ``F(initial)``. Running out of evaluations is
    reported through ``converged=False``, never raised.
    """
    options = options or OptimizerOptions()
    initial = np.asarray(initial, dtype=float).reshape(-1)
    if initial.shape != (problem.m,):
        raise ValueError(f"initial guess must have length {problem.m}")
    if np.any(initial <= 0):
        raise ValueError("initial distances must be positive")
    lo, hi = options.l_min, options.l_max
    x_init = np.clip(initial, lo, hi)
    radius = options.initial_radius or problem.wavelength / 40

    track = _Tracker(lambda x: cost_F(problem, np.clip(x, lo, hi)))
    track(x_init)
    starts = [x_init]
    if options.strategy == "scan":
        t_shape = shape_from_magnitudes(problem)
        starts = translation_scan(problem, t_shape, scales=options.scan_scales, l_min=lo, l_max=hi,
                                  n_best=options.n_starts) + starts
    elif options.strategy != "local":
        raise ValueError(f"unknown strategy {options.strategy!r}")

    bounds = [(lo, hi)] * problem.m
    best_run = None
    iterations = 0
    for x in starts:
        before = track.best_f
        run = local_minimize(track, x, bounds, options.method, options.max_evals, radius, options.final_radius)
        iterations += run.nit
        if best_run is None or track.best_f < before:
            best_run = run
        log.debug("local search from %s: F=%.6g after %d evaluations", np.round(x, 4), run.fun, run.nfev)

    t = np.clip(track.best_x, lo, hi)
    try:
        poly = reconstruct_from_halfplanes(problem.x0, problem.normals, t)
    except ReconstructionError:
        poly = None
    return ReconstructionResult(
        distances=t,
        polygon=poly,
        cost=track.best_f,
        evaluations=len(track.history),
        iterations=iterations,
        converged=best_run.converged,
        message=best_run.message,
        final_radius=best_run.final_radius,
        history=tuple(track.history),
        initial=x_init,
        starts=len(starts),
    )
