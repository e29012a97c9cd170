import filecmp
import math
import textwrap
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import cKDTree

from polyscatter.forward import BoundaryCondition
from polyscatter.geometry import ConvexPolygon
from polyscatter.pipeline import (
    ConfigError,
    SceneConfig,
    compute_metrics,
    config_from_dict,
    derive_seed,
    grid_from_csv,
    grid_to_csv,
    hausdorff_distance,
    incident_direction,
    load_config,
    parse_wavenumber,
    replay_run,
    resolve_output_dir,
    run_pipeline,
    run_single,
    summary_table,
    write_record,
)
from polyscatter.forward import IncidentWave, po_far_field_grid
from polyscatter.signal import add_noise, NoiseSpec

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TRI = [(1.0, 0.0), (2.5, -0.5), (2.5, 1.0)]


def small_config(**kw):
    base = dict(vertices=tuple(TRI), name="tri", x0=(2.136, 0.217), expected_sides=3,
                wavenumbers=((6 * math.pi, "6pi"),), deltas=(0.0, 0.05), seed=11, scene_radius=1.2)
    base.update(kw)
    return SceneConfig(**base)


@pytest.fixture(scope="module")
def record():
    return run_pipeline(small_config())


# ---- config ---------------------------------------------------------------------

def test_example_configs_load():
    soft = load_config(CONFIGS / "ex1_soft.toml")
    assert soft.boundary is BoundaryCondition.SOUND_SOFT
    assert soft.x0 == (2.136, 0.217) and soft.incident == (2, 4, 6, 8)
    assert [lab for _, lab in soft.wavenumbers] == ["6pi", "10pi"]
    assert soft.wavenumbers[1][0] == pytest.approx(10 * math.pi)
    hard = load_config(CONFIGS / "ex1_hard.toml")
    assert hard.boundary is BoundaryCondition.SOUND_HARD and hard.x0 == (1.9307, 0.1412)
    hexa = load_config(CONFIGS / "ex2_hex.toml")
    assert hexa.incident == (1, 3, 5, 7) and hexa.expected_sides == 6 and hexa.x0 == (2.582, 0.759)


def test_defaults_from_minimal_config():
    cfg = config_from_dict({"scene": {"vertices": TRI}})
    assert cfg.x0 == "true-centroid"
    np.testing.assert_allclose(cfg.location_point(), ConvexPolygon(np.array(TRI)).centroid)
    assert cfg.incident == (2, 4, 6, 8) and cfg.n_angles == 360 and cfg.deltas == (0.0,)
    assert cfg.neighbors == 2 and cfg.optimizer.strategy == "scan"


@pytest.mark.parametrize("value,k,label", [
    ("6pi", 6 * math.pi, "6pi"), ("10*pi", 10 * math.pi, "10pi"), ("6π", 6 * math.pi, "6pi"),
    (12.5, 12.5, "12.5"), ("pi", math.pi, "pi"),
])
def test_parse_wavenumber(value, k, label):
    got, lab = parse_wavenumber(value)
    assert got == pytest.approx(k, rel=1e-15) and lab == label


@pytest.mark.parametrize("value", ["-2pi", "zero", 0, "2 pies"])
def test_parse_wavenumber_rejects(value):
    with pytest.raises(ValueError):
        parse_wavenumber(value)


def _load_text(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(textwrap.dedent(text))
    return load_config(p)


@pytest.mark.parametrize("body,field,line", [
    ('[scene]\nvertices = [[0,0],[1,0],[0,1]]\nboundary = "wet"\n', "scene.boundary", 3),
    ('[scene]\nvertices = [[0,0],[1,0],[0,1]]\n[measurement]\nincident = [0, 2]\n', "measurement.incident", 4),
    ('[scene]\nvertices = [[0,0],[1,0],[0,1]]\n[noise]\ncolour = "pink"\n', "noise.colour", 4),
    ('[scene]\nvertices = [[0,0],[1,0],[1,1],[2,2]]\n', "scene.vertices", 2),
    ('[scene]\nvertices = [[0,0],[1,0],[0,1]]\n[inversion]\nmethod = "bfgs"\n', "inversion.method", 4),
    ('[scene]\nvertices = [[0,0],[1,0],[0,1]]\n[filter]\ncutoff = 999\n', "filter.cutoff", 4),
])
def test_config_errors_name_field_and_line(tmp_path, body, field, line):
    with pytest.raises(ConfigError) as ei:
        _load_text(tmp_path, body)
    assert ei.value.field == field and ei.value.line == line


def test_config_syntax_error_has_line(tmp_path):
    with pytest.raises(ConfigError) as ei:
        _load_text(tmp_path, "[scene]\nvertices = [[0,0],\n\nname = = 3\n")
    assert ei.value.line is not None


def test_missing_vertices_and_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match="vertices"):
        _load_text(tmp_path, "[scene]\nname = 'x'\n")
    with pytest.raises(ConfigError) as ei:
        _load_text(tmp_path, "[scene]\nvertices = [[0,0],[1,0],[0,1]]\n[extra]\na = 1\n")
    assert ei.value.field == "extra"


def test_incident_directions():
    np.testing.assert_allclose(incident_direction(4), (-1, 0), atol=1e-15)
    np.testing.assert_allclose(incident_direction(2), (0, 1), atol=1e-15)
    np.testing.assert_allclose(incident_direction(1), (math.sqrt(0.5), math.sqrt(0.5)), atol=1e-15)


def test_derived_seeds_distinct_and_stable():
    seeds = {derive_seed(2024, ki, di, j) for ki in range(2) for di in range(2) for j in range(1, 9)}
    assert len(seeds) == 32
    assert derive_seed(2024, 1, 1, 6) == derive_seed(2024, 1, 1, 6)
    assert derive_seed(2024, 0, 0, 2) != derive_seed(2025, 0, 0, 2)


# ---- metrics ----------------------------------------------------------------------

def _oracle_hausdorff(P, Q, n=20000):
    a, b = P.boundary_samples(n), Q.boundary_samples(n)
    return max(cKDTree(b).query(a)[0].max(), cKDTree(a).query(b)[0].max())


def test_metrics_identity(triangle):
    m = compute_metrics(triangle, triangle)
    assert m.hausdorff == 0 and m.hausdorff_rel == 0
    assert all(e == 0 for e in m.normal_errors_deg) and all(e == 0 for e in m.distance_rel_errors)
    assert m.unmatched_truth == ()


def test_metrics_dilated_square(square):
    big = ConvexPolygon(0.5 + 1.1 * (square.vertices - 0.5))
    h = hausdorff_distance(square, big)
    assert h == pytest.approx(0.05 * math.sqrt(2), rel=1e-12)
    assert h == pytest.approx(_oracle_hausdorff(square, big), abs=1e-4)
    m = compute_metrics(square, big, x0=(0.5, 0.5))
    assert max(m.normal_errors_deg) < 1e-12
    np.testing.assert_allclose(m.distance_rel_errors, 0.1, rtol=1e-12)


def test_metrics_relabeling_invariant(hexagon):
    rolled = ConvexPolygon(np.roll(hexagon.vertices, 3, axis=0))
    m = compute_metrics(hexagon, rolled)
    assert m.hausdorff == 0
    assert max(m.normal_errors_deg) < 1e-12 and max(m.distance_rel_errors) < 1e-12


def test_metrics_vertex_count_mismatch(triangle, square):
    shifted = ConvexPolygon(square.vertices + [1.2, -0.2])
    m = compute_metrics(triangle, shifted)
    assert m.hausdorff == pytest.approx(_oracle_hausdorff(triangle, shifted), abs=1e-4)
    assert len(m.normal_errors_deg) == 4
    assert sum(e is None for e in m.normal_errors_deg) == 1
    assert m.unmatched_truth == ()


def test_hausdorff_is_symmetric(triangle, hexagon):
    assert hausdorff_distance(triangle, hexagon) == hausdorff_distance(hexagon, triangle)


# ---- serialization ------------------------------------------------------------------

def test_grid_csv_round_trip_bit_exact(triangle):
    g = po_far_field_grid(triangle, IncidentWave(6 * math.pi, incident_direction(6)), "sound-hard", 360)
    g = add_noise(g, NoiseSpec(0.05, 3))
    back = grid_from_csv(grid_to_csv(g))
    assert np.array_equal(back.values, g.values)
    assert back.k == g.k and np.array_equal(back.d, g.d) and back.bc == g.bc
    assert grid_to_csv(back) == grid_to_csv(g)


def test_grid_csv_columns(triangle):
    g = po_far_field_grid(triangle, IncidentWave(6 * math.pi, incident_direction(2)), "sound-soft", 360)
    lines = [ln for ln in grid_to_csv(g).splitlines() if not ln.startswith("#")]
    assert lines[0] == "angle_deg,re,im" and len(lines) == 361
    assert lines[91].startswith("90.0,")


# ---- the run ----------------------------------------------------------------------------

def test_record_structure(record):
    assert [r.run_id for r in record.runs] == ["k6pi_delta0", "k6pi_delta0.05"]
    assert record.ok
    for run in record.runs:
        assert set(run.grids) == {2, 4, 6, 8}
        assert set(run.hashes) == {"forward", "peaks", "normals", "inversion", "metrics"}
        assert len(run.selected) == 3
        assert run.metrics.hausdorff_rel < 0.05


def test_noise_free_grids_bit_exact(record):
    run = record.runs[0]
    assert run.cutoff is None
    for gs in run.grids.values():
        assert np.array_equal(gs["noisy"].values, gs["clean"].values)
        assert np.array_equal(gs["filtered"].values, gs["clean"].values)


def test_noisy_run_uses_filter_and_own_seeds(record):
    a, b = record.runs
    assert b.cutoff is not None
    assert set(a.seeds.values()).isdisjoint(b.seeds.values())
    for j in a.grids:
        assert np.array_equal(a.grids[j]["clean"].values, b.grids[j]["clean"].values)
        assert not np.array_equal(b.grids[j]["noisy"].values, b.grids[j]["clean"].values)


def test_pairs_sorted_deterministically(record):
    pairs = record.runs[1].pairs
    keys = [(-p.magnitude, p.x_hat[1], p.source) for p in pairs]
    assert [p.magnitude for p in pairs] == sorted((p.magnitude for p in pairs), reverse=True)
    assert len(keys) == len(pairs)


def test_written_record_layout(record, tmp_path):
    out = write_record(record, tmp_path / "rec")
    assert (out / "config.json").is_file() and (out / "record.json").is_file()
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("run,k,delta,status") and len(summary) == 3
    rd = out / "k6pi_delta0"
    grids = sorted(p.name for p in (rd / "grids").iterdir())
    assert len(grids) == 12 and "d2_clean.csv" in grids and "d8_filtered.csv" in grids
    for name in ("peaks.json", "pairs.json", "normals.json", "problem.json", "result.json", "metrics.json",
                 "run.json", "overlay.svg"):
        assert (rd / name).is_file(), name


def test_rerun_is_byte_identical(record, tmp_path):
    a = write_record(record, tmp_path / "a")
    b = write_record(run_pipeline(small_config()), tmp_path / "b")
    cmp = filecmp.dircmp(a, b)

    def same(c):
        return not (c.left_only or c.right_only or c.diff_files or c.funny_files) and \
            all(same(s) for s in c.subdirs.values())

    assert same(cmp)
    for p in a.rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()


def test_replay_reproduces_downstream(record, tmp_path):
    out = write_record(record, tmp_path / "rec")
    cfg = record.config
    for run in record.runs:
        again = replay_run(cfg, out / run.run_id)
        texts, orig = again.stage_texts(), run.stage_texts()
        for name in ("peaks.json", "pairs.json", "normals.json", "problem.json", "result.json", "metrics.json"):
            assert texts[name] == orig[name], name
        for stage in ("peaks", "normals", "inversion", "metrics"):
            assert again.hashes[stage] == run.hashes[stage]


def test_replay_missing_artifact(record, tmp_path):
    out = write_record(record, tmp_path / "rec")
    (out / "k6pi_delta0" / "grids" / "d4_filtered.csv").unlink()
    with pytest.raises(FileNotFoundError, match="d4_filtered"):
        replay_run(record.config, out / "k6pi_delta0")


def test_too_few_normals_is_a_stage_failure(tmp_path):
    # 13 clusters exist (3 sides plus sidelobe clusters); ask for more
    cfg = small_config(expected_sides=16, deltas=(0.0,))
    rec = run_pipeline(cfg)
    run = rec.runs[0]
    assert not rec.ok and run.status == "failed" and run.failed_stage == "normals"
    assert run.result is None and 3 <= len(run.normals) < 16
    assert "need 16" in run.message
    out = write_record(rec, tmp_path / "fail")
    assert not (out / run.run_id / "result.json").exists()
    assert (out / run.run_id / "normals.json").exists()
    assert "failed" in summary_table(rec)


def test_seed_changes_noise_only():
    a = run_single(small_config(deltas=(0.05,)), 0, 0)
    b = run_single(small_config(deltas=(0.05,), seed=7), 0, 0)
    for j in a.grids:
        assert np.array_equal(a.grids[j]["clean"].values, b.grids[j]["clean"].values)
        assert not np.array_equal(a.grids[j]["noisy"].values, b.grids[j]["noisy"].values)


def test_output_dir_precedence(monkeypatch):
    cfg = small_config(output_dir="from-config")
    monkeypatch.delenv("POLYSCATTER_OUT", raising=False)
    assert resolve_output_dir(cfg) == Path("from-config")
    monkeypatch.setenv("POLYSCATTER_OUT", "from-env")
    assert resolve_output_dir(cfg) == Path("from-env")
    assert resolve_output_dir(cfg, "from-flag") == Path("from-flag")


def test_initial_one_reconstructs_triangle_at_10pi():
    cfg = small_config(wavenumbers=((10 * math.pi, "10pi"),), deltas=(0.0,), initial=1.0)
    run = run_single(cfg, 0, 0)
    assert run.status == "ok"
    assert run.metrics.hausdorff_rel <= 0.05


def test_hexagon_reconstruction_six_normals():
    cfg = replace(load_config(CONFIGS / "ex2_hex.toml"), wavenumbers=((10 * math.pi, "10pi"),), deltas=(0.05,))
    run = run_single(cfg, 0, 0)
    assert run.status == "ok" and len(run.selected) == 6
    assert run.metrics.hausdorff_rel <= 0.15
