import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from endosplat import io
from endosplat.cli import main

FAST = {"stride": 4, "first_iterations": 20, "iterations": 3}


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("seq")
    assert main(["synth", "--script", "static", "--out", str(root), "--frames", "10"]) == 0
    return root


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "fast.json"
    p.write_text(json.dumps(FAST))
    return p


def write_queries(path, n=4):
    io.write_queries(path, [0] * n, [np.array([10.0 + 10 * i, 20.0]) for i in range(n)])


def test_synth_writes_layout(seq_dir):
    names = {p.name for p in seq_dir.iterdir()}
    assert {"meta.json", "queries.csv", "gt_tracks.csv", "000000.png", "000000.pfm", "000009.txt", "000009.flo"} <= names
    assert len(io.load_sequence(seq_dir)) == 10


def test_track_row_count_and_determinism(seq_dir, config_file, tmp_path):
    write_queries(tmp_path / "q.csv")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["track", str(seq_dir), "--config", str(config_file), "--queries", str(tmp_path / "q.csv"), "--out", str(out)])
        assert code == 0
        outs.append((out / "trajectories.csv").read_bytes())
    lines = outs[0].decode().splitlines()
    assert lines[0] == "point_id,frame,u,v,x,y,z,visible"
    assert len(lines) - 1 == 40
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "scene.ply").exists()


def test_track_exports_intermediate_scenes(seq_dir, config_file, tmp_path):
    write_queries(tmp_path / "q.csv", 1)
    out = tmp_path / "o"
    main(["track", str(seq_dir), "--config", str(config_file), "--queries", str(tmp_path / "q.csv"), "--out", str(out), "--export-every", "4"])
    assert sorted(p.name for p in out.glob("scene_*.ply")) == ["scene_000000.ply", "scene_000004.ply", "scene_000008.ply"]


def test_missing_queries_file_fails(seq_dir, tmp_path, capsys):
    code = main(["track", str(seq_dir), "--queries", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code != 0 and "nope.csv" in capsys.readouterr().err


def test_missing_required_argument_is_usage_error(seq_dir):
    with pytest.raises(SystemExit) as exc:
        main(["track", str(seq_dir), "--out", "x"])
    assert exc.value.code == 2


def test_bad_config_fails(seq_dir, tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"stride": 0}))
    write_queries(tmp_path / "q.csv")
    code = main(["track", str(seq_dir), "--config", str(tmp_path / "c.json"), "--queries", str(tmp_path / "q.csv"), "--out", str(tmp_path / "o")])
    assert code != 0 and "stride" in capsys.readouterr().err
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    code = main(["track", str(seq_dir), "--config", str(tmp_path / "c.json"), "--queries", str(tmp_path / "q.csv"), "--out", str(tmp_path / "o")])
    assert code != 0 and "bogus" in capsys.readouterr().err


def test_unusable_frame_reports_its_index(tmp_path, config_file, capsys):
    root = tmp_path / "seq"
    main(["synth", "--script", "static", "--out", str(root), "--frames", "3"])
    io.write_mask(root / "000002.mask.png", np.ones((64, 64), bool))
    write_queries(tmp_path / "q.csv")
    code = main(["track", str(root), "--config", str(config_file), "--queries", str(tmp_path / "q.csv"), "--out", str(tmp_path / "o")])
    assert code != 0 and "frame 2" in capsys.readouterr().err


def test_corrupt_pose_names_file(tmp_path, config_file, capsys):
    root = tmp_path / "seq"
    main(["synth", "--script", "static", "--out", str(root), "--frames", "2"])
    (root / "000001.txt").write_text("1 0 0\n")
    write_queries(tmp_path / "q.csv")
    code = main(["track", str(root), "--config", str(config_file), "--queries", str(tmp_path / "q.csv"), "--out", str(tmp_path / "o")])
    assert code != 0 and "000001.txt" in capsys.readouterr().err


def test_eval_on_directory_writes_valid_report(seq_dir, config_file, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(seq_dir), "--config", str(config_file), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(report, io.metrics_schema())
    assert report["n_frames"] == 10 and report["n_points"] == 16
    assert (out / "point_errors.csv").exists() and (out / "metrics.csv").exists()


def test_eval_script_and_log_level(tmp_path, config_file):
    env_cmd = [sys.executable, "-m", "endosplat.cli", "eval", "--script", "static", "--frames", "2", "--config", str(config_file), "--out", str(tmp_path / "e")]
    proc = subprocess.run(env_cmd, capture_output=True, text=True, env={**__import__("os").environ, "ENDOSPLAT_LOG_LEVEL": "INFO"})
    assert proc.returncode == 0, proc.stderr
    assert "frame 1" in proc.stderr
    jsonschema.validate(json.loads((tmp_path / "e" / "metrics.json").read_text()), io.metrics_schema())
