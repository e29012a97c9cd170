"""
Command line: ``polyscatter run | plot | oracle``.

Errors print one line ``ERROR code=<CODE> ...: <text>`` on stderr and exit
nonzero. Human-readable output gives angles in degrees; ``--json`` output
gives radians.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_STAGE = 4
EXIT_MISSING = 5
EXIT_INPUT = 6


class CLIError(Exception):
    def __init__(self, code: str, message: str, exit_status: int, **fields):
        super().__init__(message)
        self.code = code
        self.exit_status = exit_status
        self.fields = fields

    def line(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in self.fields.items() if v is not None)
        return f"ERROR code={self.code}{extra}: {self}"


# ---- SVG -------------------------------------------------------------------

def _f(x: float) -> str:
    return f"{x:.3f}"


def _svg_open(size: int, title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<title>{_escape(title)}</title>",
        "<defs>",
        *(f'<marker id="head-{c}" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto">'
          f'<path d="M0,0 L8,4 L0,8 z" fill="{c}"/></marker>' for c in ("black", "red", "green")),
        "</defs>",
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _arrow(x0, y0, x1, y1, color, width=2.0) -> str:
    return (f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="{color}" '
            f'stroke-width="{width}" marker-end="url(#head-{color})"/>')


def polar_svg(grid, peaks=(), normals=(), size: int = 480, incident: bool = True, title: str = "") -> str:
    """Polar curve of ``|u_inf|^2`` (normalised) with annotation arrows.

    ``peaks`` are ``(index, angle)`` pairs drawn as red arrows, ``normals``
    unit vectors drawn as green arrows from the centre, and the incident
    direction is a black arrow. Every annotation is also written as an SVG
    comment so tests can read it without parsing geometry.
    """
    if size < 64:
        raise ValueError("plot size must be at least 64 pixels")
    p = np.abs(grid.values) ** 2
    pmax = float(p.max()) if p.max() > 0 else 1.0
    c = size / 2
    R = 0.42 * size
    ang = grid.angles
    r = R * p / pmax
    xs = c + r * np.cos(ang)
    ys = c - r * np.sin(ang)
    out = _svg_open(size, title or "squared modulus of the far field")
    out.append(f"<!-- grid n_angles={grid.n_angles} k={float(grid.k)!r} bc={grid.bc.value} max_power={pmax!r} -->")
    out.append(f'<circle cx="{_f(c)}" cy="{_f(c)}" r="{_f(R)}" fill="none" stroke="#cccccc" stroke-width="1"/>')
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
    out.append(f'<polygon points="{pts}" fill="none" stroke="#1f3a93" stroke-width="1.5"/>')
    if incident:
        d = grid.d
        out.append(f"<!-- annotation kind=incident angle_deg={math.degrees(math.atan2(d[1], d[0])) % 360:.6f} -->")
        out.append(_arrow(c, c, c + 1.1 * R * d[0], c - 1.1 * R * d[1], "black"))
    for idx, a in peaks:
        out.append(f"<!-- annotation kind=peak index={int(idx)} angle_deg={math.degrees(a):.6f} -->")
        out.append(_arrow(c, c, c + 1.05 * R * math.cos(a), c - 1.05 * R * math.sin(a), "red"))
    for nu in normals:
        a = math.atan2(nu[1], nu[0]) % (2 * math.pi)
        out.append(f"<!-- annotation kind=normal angle_deg={math.degrees(a):.6f} -->")
        out.append(_arrow(c, c, c + 0.5 * R * nu[0], c - 0.5 * R * nu[1], "green"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def overlay_svg(truth, recon, x0, size: int = 480, title: str = "") -> str:
    """True polygon (black), reconstruction (red, dashed) and ``x0`` (star)."""
    if size < 64:
        raise ValueError("plot size must be at least 64 pixels")
    x0 = np.asarray(x0, dtype=float)
    pts = [np.asarray(truth.vertices), x0[None, :]]
    if recon is not None:
        pts.append(np.asarray(recon.vertices))
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    mid = 0.5 * (lo + hi)
    scale = 0.8 * size / span

    def tx(p):
        return size / 2 + scale * (p[0] - mid[0]), size / 2 - scale * (p[1] - mid[1])

    def poly_el(P, style):
        s = " ".join("{},{}".format(*map(_f, tx(v))) for v in P.vertices)
        return f'<polygon points="{s}" {style}/>'

    out = _svg_open(size, title or "reconstruction overlay")
    out.append("<!-- truth " + " ".join(f"({float(v[0])!r},{float(v[1])!r})" for v in truth.vertices) + " -->")
    out.append(poly_el(truth, 'fill="none" stroke="black" stroke-width="2"'))
    if recon is not None:
        out.append("<!-- reconstruction " + " ".join(f"({float(v[0])!r},{float(v[1])!r})" for v in recon.vertices) + " -->")
        out.append(poly_el(recon, 'fill="none" stroke="red" stroke-width="2" stroke-dasharray="6,4"'))
    out.append(f"<!-- x0 ({float(x0[0])!r},{float(x0[1])!r}) -->")
    cx, cy = tx(x0)
    star = []
    for i in range(10):
        rr = 9.0 if i % 2 == 0 else 4.0
        a = math.pi / 2 + i * math.pi / 5
        star.append(f"{_f(cx + rr * math.cos(a))},{_f(cy - rr * math.sin(a))}")
    out.append(f'<polygon points="{" ".join(star)}" fill="blue"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---- commands --------------------------------------------------------------

def _vector(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from None
    if v.shape != (2,):
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}")
    return v


def cmd_run(args) -> int:
    from .pipeline import ConfigError, load_config, resolve_output_dir, run_pipeline, summary_table, write_record

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        raise CLIError("CONFIG", str(exc), EXIT_CONFIG, file=args.config, field=exc.field, line=exc.line) from exc
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    record = run_pipeline(config)
    out = write_record(record, resolve_output_dir(config, args.out))
    print(f"record: {out}")
    print(summary_table(record), end="")
    failed = [r for r in record.runs if r.status != "ok"]
    if failed:
        r = failed[0]
        raise CLIError("STAGE_FAILED", f"{len(failed)} run(s) failed; first: {r.run_id}: {r.message}", EXIT_STAGE,
                       run=r.run_id, stage=r.failed_stage)
    return 0


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CLIError("MISSING_STAGE", f"record has no {stage} stage ({path.name} not found)", EXIT_MISSING,
                       stage=stage)
    return path


def cmd_plot(args) -> int:
    from .geometry import ConvexPolygon
    from .pipeline import grid_from_csv

    rd = Path(args.record)
    if not rd.is_dir():
        raise CLIError("MISSING_RECORD", f"no record directory {rd}", EXIT_MISSING)
    run = json.loads(_need(rd / "run.json", "run").read_text())
    if args.kind == "polar":
        grids = sorted(rd.glob(f"grids/d*_{args.grid}.csv"))
        if not grids:
            _need(rd / "grids", f"{args.grid} grid")
        j = args.direction if args.direction is not None else int(re.match(r"d(\d+)_", grids[0].name).group(1))
        grid = grid_from_csv(_need(rd / "grids" / f"d{j}_{args.grid}.csv", f"{args.grid} grid").read_text())
        peaks, normals = [], []
        if not args.no_peaks:
            allp = json.loads(_need(rd / "peaks.json", "peaks").read_text())
            peaks = [(p["index"], p["angle"]) for p in allp[str(j)]["peaks"]]
        if not args.no_normals:
            pairs = json.loads(_need(rd / "pairs.json", "normals").read_text())
            normals = [p["nu"] for p in pairs if p["source"] == j]
        svg = polar_svg(grid, peaks, normals, size=args.size, incident=not args.no_incident,
                        title=f"{run['run_id']} d{j}")
        target = Path(args.output) if args.output else rd / f"polar_d{j}.svg"
    else:
        cfg = json.loads(_need(rd.parent / "config.json", "config").read_text())
        res = json.loads(_need(rd / "result.json", "result").read_text())
        if res["vertices"] is None:
            raise CLIError("MISSING_STAGE", "record has no reconstructed polygon", EXIT_MISSING, stage="reconstruction")
        svg = overlay_svg(ConvexPolygon(np.array(cfg["vertices"])), ConvexPolygon(np.array(res["vertices"])),
                          run["x0"], size=args.size, title=f"{cfg['name']} {run['run_id']}")
        target = Path(args.output) if args.output else rd / "overlay.svg"
    target.write_text(svg)
    print(target)
    return 0


def _read_polygon(path):
    from .geometry import ConvexPolygon

    text = Path(path).read_text()
    try:
        if text.lstrip().startswith(("{", "[")):
            obj = json.loads(text)
            verts = obj["vertices"] if isinstance(obj, dict) else obj
        else:
            verts = [[float(x) for x in line.replace(",", " ").split()] for line in text.splitlines()
                     if line.strip() and not line.lstrip().startswith("#")]
        return ConvexPolygon(np.array(verts, dtype=float))
    except (ValueError, KeyError, TypeError) as exc:
        raise CLIError("INPUT", f"cannot read polygon from {path}: {exc}", EXIT_INPUT) from exc


def cmd_oracle(args) -> int:
    from .forward import trapezoid_segment_integral
    from .pipeline import hausdorff_distance
    from .recovery import critical_direction, normal_from_critical

    def emit(human: str, machine: dict):
        print(json.dumps(machine, sort_keys=True) if args.json else human)

    try:
        if args.sub == "segint":
            v = trapezoid_segment_integral(args.a, args.b, args.k, args.w, n_panels=args.panels)
            emit(f"{v.real!r} {v.imag!r}", {"re": v.real, "im": v.imag, "panels": args.panels})
        elif args.sub == "reflect":
            x = [float(c) for c in critical_direction(args.d, args.nu)]
            emit(f"{x[0]!r},{x[1]!r}  (angle {math.degrees(math.atan2(x[1], x[0])) % 360:.6f} deg)",
                 {"x_hat": [x[0], x[1]], "angle": math.atan2(x[1], x[0]) % (2 * math.pi)})
        elif args.sub == "normal":
            nu = [float(c) for c in normal_from_critical(args.d, args.x_hat)]
            emit(f"{nu[0]!r},{nu[1]!r}  (angle {math.degrees(math.atan2(nu[1], nu[0])) % 360:.6f} deg)",
                 {"nu": [nu[0], nu[1]], "angle": math.atan2(nu[1], nu[0]) % (2 * math.pi)})
        elif args.sub == "hausdorff":
            h = hausdorff_distance(_read_polygon(args.first), _read_polygon(args.second), args.per_edge)
            emit(repr(h), {"hausdorff": h, "per_edge": args.per_edge})
    except CLIError:
        raise
    except ValueError as exc:
        raise CLIError("INPUT", str(exc), EXIT_INPUT, oracle=args.sub) from exc
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIError("USAGE", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polyscatter", description="Convex polygon recovery from high-frequency far-field data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run every (k, delta) case of a scene config")
    r.add_argument("config")
    r.add_argument("--seed-override", type=int, metavar="N", help="replace the config's noise seed")
    r.add_argument("--out", metavar="DIR", help="output directory (beats POLYSCATTER_OUT and the config)")
    r.set_defaults(func=cmd_run)

    pl = sub.add_parser("plot", help="write an SVG for one run directory of a record")
    pl.add_argument("record", help="run directory inside a record, e.g. runs/ex1/k6pi_delta0")
    pl.add_argument("--kind", choices=("polar", "overlay"), required=True)
    pl.add_argument("--no-normals", action="store_true", help="omit the green normal arrows")
    pl.add_argument("--no-peaks", action="store_true", help="omit the red peak arrows")
    pl.add_argument("--no-incident", action="store_true", help="omit the black incident arrow")
    pl.add_argument("--size", type=int, default=480, metavar="PX")
    pl.add_argument("--direction", type=int, metavar="J", help="incident direction index (polar; default: first)")
    pl.add_argument("--grid", choices=("clean", "noisy", "filtered"), default="filtered")
    pl.add_argument("--output", metavar="FILE")
    pl.set_defaults(func=cmd_plot)

    o = sub.add_parser("oracle", help="brute-force reference values")
    o.add_argument("--json", action="store_true", help="machine output (angles in radians)")
    osub = o.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    s = osub.add_parser("segint", help="dense trapezoid value of the segment integral")
    s.add_argument("--a", type=_vector, required=True)
    s.add_argument("--b", type=_vector, required=True)
    s.add_argument("--k", type=float, required=True)
    s.add_argument("--w", type=_vector, required=True)
    s.add_argument("--panels", type=int, default=100_000)
    s = osub.add_parser("reflect", help="critical direction d - 2 (d . nu) nu")
    s.add_argument("--d", type=_vector, required=True)
    s.add_argument("--nu", type=_vector, required=True)
    s = osub.add_parser("normal", help="normal implied by a critical direction")
    s.add_argument("--d", type=_vector, required=True)
    s.add_argument("--x-hat", type=_vector, required=True)
    s = osub.add_parser("hausdorff", help="dense-sample Hausdorff distance between two polygon files")
    s.add_argument("first")
    s.add_argument("second")
    s.add_argument("--per-edge", type=int, default=1000)
    o.set_defaults(func=cmd_oracle)
    return p


_VEC_OPTS = {"--a", "--b", "--w", "--d", "--nu", "--x-hat"}
_NUMERIC = re.compile(r"^-[0-9.]")


def _join_negative_values(argv):
    # "--nu -1,0" would otherwise be read as an unknown option
    out = []
    i = 0
    while i < len(argv):
        if argv[i] in _VEC_OPTS and i + 1 < len(argv) and _NUMERIC.match(argv[i + 1]):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            import logging

            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CLIError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(CLIError("IO", f"{exc.strerror}: {exc.filename}", EXIT_INPUT).line(), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
