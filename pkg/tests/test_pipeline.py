import numpy as np
import pytest
import yaml

from densemap.cli import EXIT_BAD_INPUT, EXIT_NUMERICAL, EXIT_OK, main
from densemap.config import ConfigError, PipelineConfig, config_from_dict, load_config
from densemap.meshing import read_ply
from densemap.pipeline import (
    Mapper,
    export_dataset,
    read_report,
    report_lines,
    run_scenario,
    timing_lines,
    write_outputs,
)
from densemap.submaps import MANIFEST_NAME, SUBMAPS_NAME, load_collection
from densemap.world import scenario_from_dict

SMALL = {
    "seed": 2,
    "max_range": 5.0,
    "camera": {"width": 48, "height": 36, "hfov_deg": 70},
    "bounds": {"min": [-1.5, -1.5, -0.1], "max": [1.5, 1.5, 1.0]},
    "primitives": [
        {"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1]},
        {"type": "sphere", "center": [0, 0, 0.25], "radius": 0.25, "color": [200, 50, 50]},
    ],
    "landmarks": {"spacing": 0.15, "budget": 40, "seed": 3},
    "trajectory": {
        "frame_rate": 2,
        "waypoints": [
            {"t": 0, "position": [0.6, 0.0, 1.2], "look_at": [0, 0, 0.1]},
            {"t": 2, "position": [0.0, 0.6, 1.2], "look_at": [0, 0, 0.1]},
            {"t": 4, "position": [-0.6, 0.0, 1.2], "look_at": [0, 0, 0.1]},
        ],
    },
}

FAST_CFG = {"voxel_size": 0.04, "block_size": 8, "spawn": {"max_keyframes_per_submap": 2}}


def small(**changes):
    doc = yaml.safe_load(yaml.safe_dump(SMALL))
    doc.update(changes)
    return doc


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def run(doc, **cfg):
    c = dict(FAST_CFG)
    c.update(cfg)
    return run_scenario(scenario_from_dict(doc), config_from_dict(c))


def test_one_frame_scenario_via_cli(tmp_path, capsys):
    doc = small()
    doc["trajectory"]["waypoints"] = doc["trajectory"]["waypoints"][:1]
    sc = write_yaml(tmp_path / "one.yaml", doc)
    cfg = write_yaml(tmp_path / "cfg.yaml", FAST_CFG)
    assert main(["run", str(sc), str(cfg), "-o", str(tmp_path / "out")]) == EXIT_OK
    values, fuse = read_report(tmp_path / "out" / "report.txt")
    assert values["frames"] == "1" and values["submaps_final"] == "1"
    assert int(values["mesh_vertices"]) > 0
    assert float(values["rmse"]) <= 0.04
    assert fuse == []
    assert not read_ply(tmp_path / "out" / "mesh.ply").is_empty
    assert "output=" in capsys.readouterr().out


def test_empty_run_gives_zeroed_report():
    res = Mapper(PipelineConfig()).finish()
    values = dict(line.split("=", 1) for line in report_lines(res))
    for key in ("rmse", "median", "frames", "keyframes", "loop_closures", "submaps_created",
                "submaps_final", "fusions", "total_blocks", "mesh_vertices", "rays_cast"):
        assert float(values[key]) == 0, key


def test_total_blocks_equals_manifest_sum(tmp_path):
    res = run(small())
    write_outputs(res, tmp_path)
    values, _ = read_report(tmp_path / "report.txt")
    coll = load_collection(tmp_path / MANIFEST_NAME)
    assert int(values["total_blocks"]) == sum(s.block_count() for s in coll) > 0
    per = {k: int(v) for k, v in values.items() if k.startswith("blocks_submap_")}
    assert sum(per.values()) == int(values["total_blocks"])
    assert len(per) == len(coll)


def test_reruns_are_byte_identical(tmp_path):
    doc = small(drift={"translation_per_frame": [0.01, 0, 0], "loop_closures": [4]})
    for name in ("a", "b"):
        write_outputs(run(doc), tmp_path / name)
    for f in ("report.txt", MANIFEST_NAME, SUBMAPS_NAME, "mesh.ply"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_fusion_off_never_destroys_submaps():
    doc = small(drift={"loop_closures": [2, 4]})
    res = run(doc, fusion_enabled=False)
    assert res.loop_closures == 2
    assert res.collection.created == len(res.collection) > 1
    assert res.fusions == []


def test_revisit_with_fusion_has_fewer_blocks():
    doc = small(drift={"loop_closures": [4, 8]})
    doc["trajectory"]["waypoints"] = [
        {"t": 0, "position": [0.6, 0.0, 1.2], "look_at": [0, 0, 0.1]},
        {"t": 2, "position": [0.0, 0.6, 1.2], "look_at": [0, 0, 0.1]},
        {"t": 4, "position": [0.6, 0.0, 1.2], "look_at": [0, 0, 0.1]},
        {"t": 6, "position": [0.0, 0.6, 1.2], "look_at": [0, 0, 0.1]},
    ]
    on = run(doc, fusion={"min_covisibility": 10})
    off = run(doc, fusion_enabled=False)
    assert on.fusions
    assert on.total_blocks() < off.total_blocks()
    assert len(on.collection) == on.collection.created - len(on.fusions)


def test_loop_closure_corrects_drift():
    doc = small(drift={"translation_per_frame": [0.02, 0, 0], "loop_closures": [8]})
    drifted = run(doc, naive=True)
    fixed = run(doc)
    assert fixed.rmse < drifted.rmse


def test_compare_integrators_reports_both_timings(tmp_path):
    res = run(small(), compare_integrators=True)
    lines = timing_lines(res)
    keys = [line.split("=")[0] for line in lines]
    assert keys == ["mean_ms_per_frame_fast", "mean_ms_per_frame_simple", "speedup_simple_over_fast"]
    assert float(lines[-1].split("=")[1]) > 0


def test_dataset_roundtrip(tmp_path):
    doc = small(drift={"translation_per_frame": [0.01, 0, 0], "loop_closures": [4]})
    sc = scenario_from_dict(doc)
    root = export_dataset(sc, tmp_path / "ds")
    assert (root / "poses.txt").exists() and (root / "loop_000004.txt").exists()
    assert len(list((root / "depth").iterdir())) == 9
    ds_doc = {"camera": doc["camera"], "max_range": doc["max_range"], "dataset": str(root)}
    from_disk = run(ds_doc)
    synthetic = run(doc)
    assert from_disk.frames == synthetic.frames
    assert from_disk.keyframes == synthetic.keyframes
    assert from_disk.loop_closures == 1
    assert from_disk.evaluated is False
    assert abs(from_disk.total_blocks() - synthetic.total_blocks()) <= 0.02 * synthetic.total_blocks()


# config and CLI

def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"voxel": 0.1})
    with pytest.raises(ConfigError):
        config_from_dict({"fusion": {"min_covisibility": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({"integrator": {"mode": "turbo"}})
    assert load_config(None).voxel_size == 0.02


def test_config_nested_values(tmp_path):
    p = write_yaml(tmp_path / "c.yaml", {"voxel_size": 0.05, "integrator": {"truncation": 0.3},
                                         "thread_count": 3, "output_dir": "x"})
    cfg = load_config(p)
    assert cfg.integrator.truncation == 0.3 and cfg.integrator.thread_count == 3
    assert str(cfg.output_dir) == "x"
    assert cfg.to_dict()["integrator"]["truncation"] == 0.3


def test_cli_missing_scenario(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml")]) == EXIT_BAD_INPUT
    assert "error" in capsys.readouterr().err


def test_cli_bad_config(tmp_path):
    sc = write_yaml(tmp_path / "s.yaml", small())
    cfg = write_yaml(tmp_path / "c.yaml", {"bogus": 1})
    assert main(["run", str(sc), str(cfg)]) == EXIT_BAD_INPUT
    assert main(["run", str(sc), "--voxel-size", "-1"]) == EXIT_BAD_INPUT


def test_cli_malformed_scenario(tmp_path):
    (tmp_path / "s.yaml").write_text("camera: [1, 2\n")
    assert main(["run", str(tmp_path / "s.yaml")]) == EXIT_BAD_INPUT


def test_cli_singular_graph_is_numerical_failure(tmp_path):
    doc = small(drift={"loop_closures": [2]})
    doc["trajectory"]["waypoints"] = [
        {"t": 0, "position": [0, 0, 1.2], "look_at": [0, 0.1, 0]},
        {"t": 0.5, "position": [0, 0, 1.2], "look_at": [0, 0.1, 3.0]},  # sky: no landmarks
        {"t": 1, "position": [0.1, 0, 1.2], "look_at": [0, 0.1, 0]},
    ]
    sc = write_yaml(tmp_path / "s.yaml", doc)
    cfg = write_yaml(tmp_path / "c.yaml", FAST_CFG)
    assert main(["run", str(sc), str(cfg), "-o", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_cli_mesh_info_eval(tmp_path, capsys):
    sc = write_yaml(tmp_path / "s.yaml", small())
    cfg = write_yaml(tmp_path / "c.yaml", FAST_CFG)
    out = tmp_path / "out"
    assert main(["run", str(sc), str(cfg), "-o", str(out), "--no-fusion", "--mode", "simple"]) == EXIT_OK
    capsys.readouterr()
    assert main(["mesh", str(out / MANIFEST_NAME), "-o", str(tmp_path / "m.ply"), "--ascii"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "vertices=" in text
    assert (tmp_path / "m.ply").read_bytes().startswith(b"ply\nformat ascii")
    assert main(["info", str(out)]) == EXIT_OK
    info = capsys.readouterr().out
    values, _ = read_report(out / "report.txt")
    assert f"total_blocks={values['total_blocks']}" in info
    assert main(["info", str(out / SUBMAPS_NAME)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", str(out / "mesh.ply"), str(sc)]) == EXIT_OK
    rmse = float(capsys.readouterr().out.split()[0].split("=")[1])
    assert rmse == pytest.approx(float(values["rmse"]), rel=1e-3, abs=1e-6)


def test_cli_eval_without_primitives(tmp_path):
    root = export_dataset(scenario_from_dict(small()), tmp_path / "ds", max_frames=1)
    ds = write_yaml(tmp_path / "d.yaml", {"camera": SMALL["camera"], "dataset": str(root)})
    from densemap.meshing import TriMesh, write_ply
    write_ply(tmp_path / "m.ply", TriMesh([[0, 0, 0]]))
    assert main(["eval", str(tmp_path / "m.ply"), str(ds)]) == EXIT_BAD_INPUT


def test_shipped_default_config_matches_code_defaults():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1]
    assert load_config(root / "configs" / "default.yaml").to_dict() == load_config(None).to_dict()
