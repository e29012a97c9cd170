"""
End-to-end experiments: scene configuration, the forward -> noise -> filter
-> peaks -> normals -> inversion chain, error metrics against the true
polygon, and persistence of every intermediate artifact as text.

The location point ``x0`` is an input (an explicit point or the true
centroid); no location-finding scheme is run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .forward import BoundaryCondition, FarFieldGrid, IncidentWave, po_far_field_grid
from .geometry import ConvexPolygon, GeometryError, angle_of, cells, check_admissibility
from .recovery import (
    CriticalPair,
    EffectiveNormalSet,
    InversionProblem,
    OptimizerOptions,
    ReconstructionResult,
    assemble_problem,
    group_effective_normals,
    minimize_distances,
    select_normals,
)
from .signal import NoiseSpec, PeakSet, add_noise, default_cutoff, detect_backscatter_peaks, fourier_filter

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ENV = "POLYSCATTER_OUT"


class ConfigError(ValueError):
    """Invalid scene configuration; ``field`` and ``line`` locate the problem."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


def incident_direction(j: int) -> np.ndarray:
    """``d_j = (cos(j pi/4), sin(j pi/4))``."""
    return np.array([math.cos(j * math.pi / 4), math.sin(j * math.pi / 4)])


_K_RE = re.compile(r"^\s*([0-9]*\.?[0-9]*(?:[eE][-+]?[0-9]+)?)\s*\*?\s*(pi|π)?\s*$")


def parse_wavenumber(value) -> tuple[float, str]:
    """Number or a string such as ``"6pi"``; returns ``(k, label)``."""
    if isinstance(value, bool):
        raise ValueError(f"invalid wavenumber {value!r}")
    if isinstance(value, (int, float)):
        k = float(value)
        label = repr(k)
    else:
        m = _K_RE.match(str(value))
        if not m or (not m.group(1) and not m.group(2)):
            raise ValueError(f"invalid wavenumber {value!r}; use a number or e.g. '6pi'")
        coef = float(m.group(1)) if m.group(1) else 1.0
        k = coef * math.pi if m.group(2) else coef
        label = f"{m.group(1)}pi" if m.group(2) else repr(k)
    if not (k > 0 and math.isfinite(k)):
        raise ValueError(f"wavenumber must be positive, got {value!r}")
    return k, label


@dataclass(frozen=True)
class SceneConfig:
    """Everything one experiment needs. The file format is described in the README."""

    vertices: tuple[tuple[float, float], ...]
    boundary: BoundaryCondition = BoundaryCondition.SOUND_SOFT
    name: str = "scene"
    x0: tuple[float, float] | str = "true-centroid"
    expected_sides: int | None = None
    wavenumbers: tuple[tuple[float, str], ...] = ((6 * math.pi, "6pi"),)
    incident: tuple[int, ...] = (2, 4, 6, 8)
    n_angles: int = 360
    deltas: tuple[float, ...] = (0.0,)
    seed: int = 0
    filter_enabled: bool = True
    filter_noise_free: bool = False
    filter_cutoff: int | str = "auto"
    scene_radius: float | str = "auto"
    filter_center: str = "x0"
    peak_window: int = 5
    peak_prominence: float = 2.0
    angle_tol_deg: float = 10.0
    min_relative: float = 0.1
    neighbors: int = 2
    initial: float | str = "auto"
    quad_step: float | str = "auto"
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    output_dir: str = "runs"

    @property
    def polygon(self) -> ConvexPolygon:
        return ConvexPolygon(np.array(self.vertices, dtype=float))

    def location_point(self) -> np.ndarray:
        if isinstance(self.x0, str):
            return self.polygon.centroid
        return np.array(self.x0, dtype=float)

    def radius(self) -> float:
        """A-priori scene radius about ``x0``; ``"auto"`` takes the farthest true vertex."""
        if isinstance(self.scene_radius, str):
            v = self.polygon.vertices - self.location_point()
            return float(np.max(np.hypot(v[:, 0], v[:, 1])))
        return float(self.scene_radius)

    def with_seed(self, seed: int) -> "SceneConfig":
        return replace(self, seed=int(seed))


def _line_of(text: str, key: str):
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def _pair(v, what):
    a = np.asarray(v, dtype=float)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{what} must be a pair of finite numbers")
    return float(a[0]), float(a[1])


def config_from_dict(raw: dict, text: str = "") -> SceneConfig:
    """Validate a parsed config mapping. Unknown sections or keys are errors."""
    schema = {
        "scene": {"name", "vertices", "boundary", "x0", "expected_sides"},
        "measurement": {"wavenumbers", "incident", "n_angles"},
        "noise": {"deltas", "seed"},
        "filter": {"enabled", "noise_free", "cutoff", "scene_radius", "center"},
        "peaks": {"window", "prominence"},
        "grouping": {"angle_tol_deg", "min_relative"},
        "inversion": {"neighbors", "initial", "quad_step", "method", "strategy", "max_evals", "l_min", "l_max",
                      "n_starts", "initial_radius", "final_radius"},
        "output": {"dir"},
    }
    for sec, body in raw.items():
        if sec not in schema:
            raise ConfigError(f"unknown section [{sec}]", field=sec, line=_line_of(text, f"[{sec}]".strip("[]")))
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table", field=sec)
        for key in body:
            if key not in schema[sec]:
                raise ConfigError(f"unknown key {sec}.{key}", field=f"{sec}.{key}", line=_line_of(text, key))

    def get(sec, key, default):
        return raw.get(sec, {}).get(key, default)

    def fail(sec, key, msg):
        raise ConfigError(f"{sec}.{key}: {msg}", field=f"{sec}.{key}", line=_line_of(text, key))

    kw = {}
    try:
        verts = tuple(_pair(v, "vertex") for v in get("scene", "vertices", None))
        ConvexPolygon(np.array(verts))
    except (TypeError, ValueError) as exc:
        fail("scene", "vertices", exc if "vertices" in raw.get("scene", {}) else "missing")
    kw["vertices"] = verts
    kw["name"] = str(get("scene", "name", "scene"))
    try:
        kw["boundary"] = BoundaryCondition.parse(get("scene", "boundary", "sound-soft"))
    except ValueError as exc:
        fail("scene", "boundary", exc)
    x0 = get("scene", "x0", "true-centroid")
    if isinstance(x0, str):
        if x0 != "true-centroid":
            fail("scene", "x0", "expected a point or 'true-centroid'")
        kw["x0"] = x0
    else:
        try:
            kw["x0"] = _pair(x0, "x0")
        except (TypeError, ValueError) as exc:
            fail("scene", "x0", exc)
    m = get("scene", "expected_sides", None)
    if m is not None and (not isinstance(m, int) or m < 3):
        fail("scene", "expected_sides", "must be an integer >= 3")
    kw["expected_sides"] = m

    try:
        ks = get("measurement", "wavenumbers", ["6pi"])
        ks = [ks] if isinstance(ks, (str, int, float)) else ks
        kw["wavenumbers"] = tuple(parse_wavenumber(k) for k in ks)
        if not kw["wavenumbers"]:
            raise ValueError("need at least one wavenumber")
    except (TypeError, ValueError) as exc:
        fail("measurement", "wavenumbers", exc)
    inc = get("measurement", "incident", [2, 4, 6, 8])
    if not isinstance(inc, list) or not inc or not all(isinstance(j, int) and 1 <= j <= 8 for j in inc) \
            or len(set(inc)) != len(inc):
        fail("measurement", "incident", "need distinct direction indices in 1..8")
    kw["incident"] = tuple(inc)
    n = get("measurement", "n_angles", 360)
    if not isinstance(n, int) or n < 8:
        fail("measurement", "n_angles", "must be an integer >= 8")
    kw["n_angles"] = n

    deltas = get("noise", "deltas", [0.0])
    deltas = [deltas] if isinstance(deltas, (int, float)) else deltas
    if not isinstance(deltas, list) or not deltas or not all(isinstance(x, (int, float)) and x >= 0 for x in deltas):
        fail("noise", "deltas", "need non-negative noise levels")
    kw["deltas"] = tuple(float(x) for x in deltas)
    seed = get("noise", "seed", 0)
    if not isinstance(seed, int) or seed < 0:
        fail("noise", "seed", "must be a non-negative integer")
    kw["seed"] = seed

    kw["filter_enabled"] = bool(get("filter", "enabled", True))
    kw["filter_noise_free"] = bool(get("filter", "noise_free", False))
    cut = get("filter", "cutoff", "auto")
    if not (cut == "auto" or (isinstance(cut, int) and 0 <= cut <= n // 2)):
        fail("filter", "cutoff", f"'auto' or an integer in 0..{n // 2}")
    kw["filter_cutoff"] = cut
    rad = get("filter", "scene_radius", "auto")
    if not (rad == "auto" or (isinstance(rad, (int, float)) and rad > 0)):
        fail("filter", "scene_radius", "'auto' or a positive number")
    kw["scene_radius"] = rad if rad == "auto" else float(rad)
    center = get("filter", "center", "x0")
    if center not in ("x0", "origin"):
        fail("filter", "center", "'x0' or 'origin'")
    kw["filter_center"] = center

    w = get("peaks", "window", 5)
    if not isinstance(w, int) or w < 1:
        fail("peaks", "window", "must be a positive integer")
    kw["peak_window"] = w
    pr = get("peaks", "prominence", 2.0)
    if not isinstance(pr, (int, float)) or pr < 0:
        fail("peaks", "prominence", "must be non-negative")
    kw["peak_prominence"] = float(pr)
    tol = get("grouping", "angle_tol_deg", 10.0)
    if not isinstance(tol, (int, float)) or not 0 < tol < 180:
        fail("grouping", "angle_tol_deg", "must be in (0, 180)")
    kw["angle_tol_deg"] = float(tol)
    mr = get("grouping", "min_relative", 0.1)
    if not isinstance(mr, (int, float)) or not 0 <= mr <= 1:
        fail("grouping", "min_relative", "must be in [0, 1]")
    kw["min_relative"] = float(mr)

    q = get("inversion", "neighbors", 2)
    if not isinstance(q, int) or q < 0:
        fail("inversion", "neighbors", "must be a non-negative integer")
    kw["neighbors"] = q
    for key in ("initial", "quad_step"):
        v = get("inversion", key, "auto")
        if not (v == "auto" or (isinstance(v, (int, float)) and v > 0)):
            fail("inversion", key, "'auto' or a positive number")
        kw[key] = v if v == "auto" else float(v)
    opt = {}
    for key, typ in (("method", str), ("strategy", str), ("max_evals", int), ("l_min", float), ("l_max", float),
                     ("n_starts", int), ("initial_radius", float), ("final_radius", float)):
        if key in raw.get("inversion", {}):
            v = raw["inversion"][key]
            if typ is float and isinstance(v, int):
                v = float(v)
            if not isinstance(v, typ) or isinstance(v, bool):
                fail("inversion", key, f"expected {typ.__name__}")
            opt[key] = v
    if opt.get("method", "trust-region") not in ("trust-region", "nelder-mead"):
        fail("inversion", "method", "'trust-region' or 'nelder-mead'")
    if opt.get("strategy", "scan") not in ("scan", "local"):
        fail("inversion", "strategy", "'scan' or 'local'")
    kw["optimizer"] = OptimizerOptions(**opt)
    if not kw["optimizer"].l_min < kw["optimizer"].l_max:
        fail("inversion", "l_max", "must exceed l_min")
    kw["output_dir"] = str(get("output", "dir", "runs"))
    return SceneConfig(**kw)


def load_config(path) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"parse error: {exc}", line=int(m.group(1)) if m else None) from exc
    return config_from_dict(raw, text)


def derive_seed(base: int, k_index: int, delta_index: int, direction: int) -> int:
    """Independent 64-bit noise seed for one (k, delta, d) combination."""
    ss = np.random.SeedSequence(int(base), spawn_key=(int(k_index), int(delta_index), int(direction)))
    lo, hi = (int(x) for x in ss.generate_state(2, dtype=np.uint32))
    return (hi << 32) | lo


# ---- metrics ---------------------------------------------------------------

def _point_segment_distances(p, a, b):
    """Distances from points ``p`` (n, 2) to the closed polygon with edges a[j]-b[j]."""
    e = b - a
    ee = np.einsum("ij,ij->i", e, e)
    rel = p[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("nij,ij->ni", rel, e) / ee, 0.0, 1.0)
    diff = rel - s[..., None] * e[None, :, :]
    return np.sqrt(np.min(np.einsum("nij,nij->ni", diff, diff), axis=1))


def _same_vertices(P: ConvexPolygon, Q: ConvexPolygon) -> bool:
    # identical vertex cycles; sampling would otherwise leave ~1e-16 residues
    a, b = P.vertices, Q.vertices
    if a.shape != b.shape:
        return False
    return any(np.array_equal(a, np.roll(b, s, axis=0)) for s in range(len(b)))


def hausdorff_distance(P: ConvexPolygon, Q: ConvexPolygon, per_edge: int = 1000) -> float:
    """Symmetric Hausdorff distance between the boundaries.

    Each boundary is sampled with ``per_edge`` points per side and distances
    are taken to the exact other boundary.
    """
    if _same_vertices(P, Q):
        return 0.0

    def one_way(A, B):
        pts = A.boundary_samples(per_edge)
        vb = B.vertices
        return float(np.max(_point_segment_distances(pts, vb, np.roll(vb, -1, axis=0))))

    return max(one_way(P, Q), one_way(Q, P))


@dataclass(frozen=True)
class Metrics:
    hausdorff: float
    hausdorff_rel: float
    normal_errors_deg: tuple[float | None, ...]  # per recovered side
    distance_rel_errors: tuple[float | None, ...]
    matched: tuple[int | None, ...]  # true cell index per recovered side
    unmatched_truth: tuple[int, ...]

    def to_dict(self):
        return {
            "hausdorff": self.hausdorff,
            "hausdorff_rel": self.hausdorff_rel,
            "normal_errors_deg": list(self.normal_errors_deg),
            "distance_rel_errors": list(self.distance_rel_errors),
            "matched": list(self.matched),
            "unmatched_truth": list(self.unmatched_truth),
        }


def _angdiff(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def compute_metrics(truth: ConvexPolygon, result, x0=None, per_edge: int = 1000) -> Metrics:
    """Compare a reconstruction with the true polygon.

    ``result`` is a :class:`ReconstructionResult` or a polygon. Every
    recovered side is matched to the true side with the nearest normal angle
    (ties: lower true index). When several recovered sides pick the same true
    side, only the closest keeps it and the others are reported unmatched
    (``None``). Distances are support distances from ``x0`` (default: the
    true centroid).
    """
    poly = result.polygon if isinstance(result, ReconstructionResult) else result
    if poly is None:
        raise ValueError("reconstruction has no polygon")
    x0 = truth.centroid if x0 is None else np.asarray(x0, dtype=float)
    h = hausdorff_distance(truth, poly, per_edge)
    t_ang = [angle_of(c.normal) for c in cells(truth)]
    r_ang = [angle_of(c.normal) for c in cells(poly)]
    t_dist = truth.support_distances(x0)
    r_dist = poly.support_distances(x0)
    best = []
    for a in r_ang:
        errs = [_angdiff(a, b) for b in t_ang]
        best.append(int(np.argmin(errs)))  # argmin returns the first (lowest) index on ties
    matched: list[int | None] = list(best)
    for j in set(best):
        claim = [i for i, b in enumerate(best) if b == j]
        if len(claim) > 1:
            keep = min(claim, key=lambda i: (_angdiff(r_ang[i], t_ang[j]), i))
            for i in claim:
                if i != keep:
                    matched[i] = None
    nerr = tuple(None if j is None else math.degrees(_angdiff(r_ang[i], t_ang[j])) for i, j in enumerate(matched))
    derr = tuple(None if j is None else abs(r_dist[i] - t_dist[j]) / abs(t_dist[j]) for i, j in enumerate(matched))
    unmatched = tuple(j for j in range(len(t_ang)) if j not in matched)
    return Metrics(h, h / truth.diameter, nerr, derr, tuple(matched), unmatched)


# ---- serialization ---------------------------------------------------------

def grid_to_csv(grid: FarFieldGrid) -> str:
    buf = io.StringIO()
    buf.write(f"# k={float(grid.k)!r}\n# d={float(grid.d[0])!r},{float(grid.d[1])!r}\n# bc={grid.bc.value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["angle_deg", "re", "im"])
    deg = 360.0 * np.arange(grid.n_angles) / grid.n_angles
    for a, v in zip(deg, grid.values):
        w.writerow([repr(float(a)), repr(float(v.real)), repr(float(v.imag))])
    return buf.getvalue()


def grid_from_csv(text: str) -> FarFieldGrid:
    meta = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
        elif line and not line.startswith("angle_deg"):
            rows.append(line)
    vals = [complex(float(r), float(i)) for _, r, i in csv.reader(rows)]
    d = tuple(float(x) for x in meta["d"].split(","))
    return FarFieldGrid(values=np.array(vals), k=float(meta["k"]), d=np.array(d), bc=meta["bc"])


def _c(z):
    return [float(z.real), float(z.imag)]


def _v(a):
    return [float(x) for x in np.asarray(a).reshape(-1)]


def pair_to_dict(p: CriticalPair):
    return {"d": _v(p.d), "x_hat": _v(p.x_hat), "magnitude": p.magnitude, "nu": _v(p.nu),
            "source": p.source, "peak_index": p.peak_index}


def peaks_to_dict(ps: PeakSet):
    return {"d": _v(ps.d), "median_power": ps.median_power,
            "peaks": [{"index": p.index, "angle": p.angle, "angle_deg": math.degrees(p.angle), "power": p.power}
                      for p in ps]}


def normals_to_dict(ns: EffectiveNormalSet):
    return [{"normal": _v(e.normal), "angle_deg": math.degrees(e.angle), "pair": pair_to_dict(e.pair),
             "members": [pair_to_dict(p) for p in e.members]} for e in ns]


def problem_to_dict(pr: InversionProblem):
    return {"x0": _v(pr.x0), "normals": [_v(n) for n in pr.normals], "pairs": [pair_to_dict(p) for p in pr.pairs],
            "cell_of": list(pr.cell_of), "k": pr.k, "bc": pr.bc.value, "quad_step": pr.quad_step,
            "obs_d": [_v(x) for x in pr.obs_d], "obs_x_hat": [_v(x) for x in pr.obs_x_hat],
            "obs_cell": [int(j) for j in pr.obs_cell], "data": [_c(z) for z in pr.data]}


def result_to_dict(r: ReconstructionResult):
    return {"distances": _v(r.distances),
            "vertices": None if r.polygon is None else [_v(v) for v in r.polygon.vertices],
            "cost": r.cost, "evaluations": r.evaluations, "iterations": r.iterations, "converged": r.converged,
            "message": r.message, "final_radius": r.final_radius, "initial": _v(r.initial), "starts": r.starts}


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---- the run ---------------------------------------------------------------

@dataclass
class RunResult:
    """One (k, delta) reconstruction with all its intermediates."""

    k: float
    k_label: str
    delta: float
    seeds: dict
    x0: np.ndarray
    grids: dict = field(default_factory=dict)  # j -> {"clean", "noisy", "filtered"}
    cutoff: int | None = None
    peaks: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)
    normals: EffectiveNormalSet | None = None
    selected: EffectiveNormalSet | None = None
    problem: InversionProblem | None = None
    result: ReconstructionResult | None = None
    metrics: Metrics | None = None
    status: str = "ok"
    failed_stage: str | None = None
    message: str = ""
    hashes: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return f"k{self.k_label}_delta{self.delta:g}"

    def summary_row(self) -> dict:
        m = self.metrics
        return {
            "run": self.run_id,
            "k": self.k,
            "delta": self.delta,
            "status": self.status,
            "n_normals": 0 if self.normals is None else len(self.normals),
            "hausdorff": None if m is None else m.hausdorff,
            "hausdorff_rel": None if m is None else m.hausdorff_rel,
            "max_normal_err_deg": None if m is None else max((e for e in m.normal_errors_deg if e is not None), default=None),
            "max_dist_rel_err": None if m is None else max((e for e in m.distance_rel_errors if e is not None), default=None),
            "cost": None if self.result is None else self.result.cost,
        }

    def stage_texts(self) -> dict:
        """Serialised artifacts keyed by relative path inside the run directory."""
        out = {}
        for j, gs in self.grids.items():
            for kind, g in gs.items():
                out[f"grids/d{j}_{kind}.csv"] = grid_to_csv(g)
        if self.peaks:
            out["peaks.json"] = _dumps({str(j): peaks_to_dict(p) for j, p in self.peaks.items()})
            out["pairs.json"] = _dumps([pair_to_dict(p) for p in self.pairs])
        if self.normals is not None:
            out["normals.json"] = _dumps({"all": normals_to_dict(self.normals),
                                          "selected": None if self.selected is None else normals_to_dict(self.selected)})
        if self.problem is not None:
            out["problem.json"] = _dumps(problem_to_dict(self.problem))
        if self.result is not None:
            out["result.json"] = _dumps(result_to_dict(self.result))
        if self.metrics is not None:
            out["metrics.json"] = _dumps(self.metrics.to_dict())
        out["run.json"] = _dumps({
            "run_id": self.run_id, "k": self.k, "k_label": self.k_label, "delta": self.delta,
            "seeds": {str(j): s for j, s in self.seeds.items()}, "x0": _v(self.x0), "cutoff": self.cutoff,
            "status": self.status, "failed_stage": self.failed_stage, "message": self.message,
            "input_hashes": self.hashes,
        })
        return out


@dataclass
class RunRecord:
    config: SceneConfig
    runs: list[RunResult]

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.runs)


def _forward(config: SceneConfig, run: RunResult, k_index: int, d_index: int):
    poly = config.polygon
    center = run.x0 if config.filter_center == "x0" else None
    use_filter = config.filter_enabled and (run.delta > 0 or config.filter_noise_free)
    if use_filter:
        run.cutoff = (default_cutoff(run.k, config.radius(), config.n_angles)
                      if config.filter_cutoff == "auto" else int(config.filter_cutoff))
    for j in config.incident:
        seed = derive_seed(config.seed, k_index, d_index, j)
        run.seeds[j] = seed
        clean = po_far_field_grid(poly, IncidentWave(run.k, incident_direction(j)), config.boundary, config.n_angles)
        noisy = add_noise(clean, NoiseSpec(run.delta, seed))
        filtered = fourier_filter(noisy, run.cutoff, center) if use_filter else noisy
        run.grids[j] = {"clean": clean, "noisy": noisy, "filtered": filtered}


def _downstream(config: SceneConfig, run: RunResult):
    """Peaks -> normals -> inversion -> metrics, from ``run.grids[j]["filtered"]``."""
    filtered = {j: run.grids[j]["filtered"] for j in config.incident}
    run.hashes["peaks"] = digest("".join(grid_to_csv(filtered[j]) for j in config.incident))
    pairs = []
    for j in config.incident:
        ps = detect_backscatter_peaks(filtered[j], config.peak_window, config.peak_prominence)
        run.peaks[j] = ps
        pairs += [CriticalPair.from_peak(ps.d, p.direction, p.power, source=j, peak_index=p.index) for p in ps]
    run.pairs = sorted(pairs, key=lambda p: (-p.magnitude, angle_of(p.x_hat), p.source))
    run.hashes["normals"] = digest(_dumps([pair_to_dict(p) for p in run.pairs]))
    run.normals = group_effective_normals(run.pairs, math.radians(config.angle_tol_deg))
    m = config.expected_sides
    run.selected = select_normals(run.normals, m, config.min_relative)
    if len(run.selected) < (m or 3):
        run.status, run.failed_stage = "failed", "normals"
        run.message = f"found {len(run.selected)} effective normals, need {m or 3}"
        return
    qstep = None if config.quad_step == "auto" else config.quad_step
    run.problem = assemble_problem(run.x0, run.selected, filtered, run.k, config.boundary,
                                   neighbors=config.neighbors, quad_step=qstep)
    run.hashes["inversion"] = digest(_dumps(problem_to_dict(run.problem)))
    l0 = 0.5 * config.radius() if config.initial == "auto" else config.initial
    try:
        run.result = minimize_distances(run.problem, np.full(run.problem.m, l0), config.optimizer)
    except (ValueError, GeometryError) as exc:
        run.status, run.failed_stage, run.message = "failed", "inversion", str(exc)
        return
    if run.result.polygon is None:
        run.status, run.failed_stage = "failed", "reconstruction"
        run.message = "best distances do not define a convex polygon"
        return
    run.hashes["metrics"] = digest(_dumps(result_to_dict(run.result)))
    run.metrics = compute_metrics(config.polygon, run.result, run.x0)


def run_single(config: SceneConfig, k_index: int, d_index: int) -> RunResult:
    k, label = config.wavenumbers[k_index]
    delta = config.deltas[d_index]
    run = RunResult(k=k, k_label=label, delta=delta, seeds={}, x0=config.location_point())
    _forward(config, run, k_index, d_index)
    run.hashes["forward"] = digest(_dumps({"vertices": [list(v) for v in config.vertices], "k": k,
                                           "bc": config.boundary.value, "incident": list(config.incident),
                                           "n_angles": config.n_angles, "delta": delta,
                                           "seeds": {str(j): s for j, s in run.seeds.items()}, "cutoff": run.cutoff}))
    _downstream(config, run)
    log.info("%s: %s", run.run_id, run.status)
    return run


def run_pipeline(config: SceneConfig) -> RunRecord:
    """Every (k, delta) combination of the config, in config order."""
    admiss = [check_admissibility(config.polygon, k) for k, _ in config.wavenumbers]
    for (k, label), rep in zip(config.wavenumbers, admiss):
        if not rep.passed:
            log.warning("polygon is not admissible at k=%s (%s)", label, rep)
    runs = [run_single(config, ki, di) for ki in range(len(config.wavenumbers)) for di in range(len(config.deltas))]
    return RunRecord(config=config, runs=runs)


def replay_run(config: SceneConfig, run_dir) -> RunResult:
    """Re-run peaks, normals and inversion from a persisted run's filtered grids."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    run = RunResult(k=meta["k"], k_label=meta["k_label"], delta=meta["delta"],
                    seeds={int(j): s for j, s in meta["seeds"].items()}, x0=np.array(meta["x0"]),
                    cutoff=meta["cutoff"])
    for j in config.incident:
        path = run_dir / "grids" / f"d{j}_filtered.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing stage artifact {path}")
        g = grid_from_csv(path.read_text())
        run.grids[j] = {"filtered": g}
    run.hashes["forward"] = meta["input_hashes"].get("forward")
    _downstream(config, run)
    return run


SUMMARY_FIELDS = ["run", "k", "delta", "status", "n_normals", "hausdorff", "hausdorff_rel",
                  "max_normal_err_deg", "max_dist_rel_err", "cost"]


def summary_table(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in record.runs:
        w.writerow({key: ("" if v is None else repr(v) if isinstance(v, float) else v)
                    for key, v in r.summary_row().items()})
    return buf.getvalue()


def config_to_dict(config: SceneConfig) -> dict:
    d = {f: getattr(config, f) for f in config.__dataclass_fields__}
    d["boundary"] = config.boundary.value
    d["wavenumbers"] = [{"k": k, "label": lab} for k, lab in config.wavenumbers]
    d["optimizer"] = {f: getattr(config.optimizer, f) for f in config.optimizer.__dataclass_fields__}
    d["optimizer"]["scan_scales"] = [float(s) for s in config.optimizer.scan_scales]
    d["vertices"] = [list(v) for v in config.vertices]
    return d


def resolve_output_dir(config: SceneConfig, override=None) -> Path:
    """``override`` (e.g. a CLI flag) beats the environment variable, which beats the config."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(config.output_dir)


def write_record(record: RunRecord, out_dir, plots: bool = True) -> Path:
    """Persist a record as a directory of text files and return its path."""
    from .cli import overlay_svg  # plotting lives with the CLI

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dumps(config_to_dict(record.config)))
    index = []
    for run in record.runs:
        rd = out / run.run_id
        for rel, text in run.stage_texts().items():
            p = rd / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        if plots and run.result is not None and run.result.polygon is not None:
            (rd / "overlay.svg").write_text(overlay_svg(record.config.polygon, run.result.polygon, run.x0,
                                                        title=f"{record.config.name} {run.run_id}"))
        index.append({"run_id": run.run_id, "status": run.status, "failed_stage": run.failed_stage})
    (out / "record.json").write_text(_dumps({"name": record.config.name, "runs": index}))
    (out / "summary.csv").write_text(summary_table(record))
    return out
