import json
import subprocess
import sys

import numpy as np
import pytest

from deskrecon.cli import main, make_fixture
from deskrecon.colmap import load_captured_scene
from deskrecon.fileio import read_csv, read_ply, read_ppm

TINY = """\
scene.preset = box-cluster
scene.resolution = 16
scene.n_candidates = 8
scene.n_test = 2
scene.gt_gaussians = 300
scene.sfm_count = 120
schedule.initial_views = 2
schedule.add_every = 3
schedule.target_views = 4
schedule.total_iters = 9
coverage.resolution = 8
sapoints.stride = 2
run.log_every = 3
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


class TestRun:
    def test_outputs(self, tiny_cfg, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(tiny_cfg), "--out", str(out)]) == 0
        assert "psnr" in capsys.readouterr().out
        summary = json.loads((out / "summary.json").read_text())
        assert summary["selection_rounds"] == 2 and len(summary["training_views"]) == 4
        assert set(summary["timing_ms"]) >= {"t_sapoints_ms", "t_prefilter_ms", "t_fisher_ms", "train_per_iter"}
        assert summary["ause"] is None or 0 <= summary["ause"] <= 1
        rows = read_csv(out / "run.csv")
        assert [int(r["iteration"]) for r in rows] == [3, 6, 9]
        sel = read_csv(out / "selection.csv")
        assert sum(r["chosen"] == "1" for r in sel) == 2
        assert all(r["fisher_score"] != "" for r in sel if r["in_cprime"] == "1")
        assert len(json.loads((out / "timing.json").read_text())) == 2
        assert read_ppm(next((out / "renders").iterdir())).shape == (16, 16, 3)
        assert len(read_ply(out / "cloud.ply")) == summary["n_gaussians"]
        assert (out / "config.cfg").read_text().startswith("scene.preset = box-cluster")

    def test_initial_equals_target(self, tiny_cfg, tmp_path):
        out = tmp_path / "o"
        tiny_cfg.write_text(TINY.replace("schedule.target_views = 4", "schedule.target_views = 2"))
        assert main(["run", "--config", str(tiny_cfg), "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["selection_rounds"] == 0
        assert read_csv(out / "selection.csv") == []

    def test_byte_identical_csvs(self, tiny_cfg, tmp_path):
        for d in ("a", "b"):
            assert main(["run", "--config", str(tiny_cfg), "--out", str(tmp_path / d), "--seed", "5"]) == 0
        for name in ("run.csv", "selection.csv", "cloud.ply"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_mode_flag(self, tiny_cfg, tmp_path):
        out = tmp_path / "r"
        assert main(["run", "--config", str(tiny_cfg), "--out", str(out), "--mode", "random"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "random"
        assert all(r["hamming_d"] == "" for r in read_csv(out / "selection.csv"))

    def test_bad_config_exit_status(self, tiny_cfg, tmp_path, capsys):
        tiny_cfg.write_text(TINY + "residual.alpha = 0\n")
        assert main(["run", "--config", str(tiny_cfg), "--out", str(tmp_path / "x")]) == 2
        assert "residual.alpha" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_bad_mode_exit_status(self, tiny_cfg, tmp_path, capsys):
        assert main(["run", "--config", str(tiny_cfg), "--mode", "best"]) == 2
        assert "selection.mode" in capsys.readouterr().err

    def test_module_entry_point(self, tiny_cfg):
        res = subprocess.run([sys.executable, "-m", "deskrecon", "validate-config", str(tiny_cfg)],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "schedule.total_iters = 9" in res.stdout


class TestValidateConfig:
    def test_prints_resolved_values(self, tiny_cfg, capsys):
        assert main(["validate-config", str(tiny_cfg)]) == 0
        out = capsys.readouterr().out
        assert "scene.resolution = 16" in out and "coverage.N = 20.0" in out

    def test_rejects(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("coverage.N = 150\n")
        assert main(["validate-config", str(p)]) == 2
        assert "coverage.N" in capsys.readouterr().err


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    return make_fixture("sphere-room", tmp_path_factory.mktemp("fx") / "cap", seed=0, resolution=16)


class TestFixture:
    def test_layout(self, fixture_dir):
        sc = load_captured_scene(fixture_dir)
        assert len(sc.candidates) == 40 and len(sc.test_views) == 8
        assert sc.correspondence_dir is not None
        assert len(list(sc.correspondence_dir.iterdir())) == 40

    def test_images_match_synthetic_scene(self, fixture_dir):
        from deskrecon.scenes import make_scene
        from deskrecon.fileio import to_bytes

        syn = make_scene("sphere-room", 0, resolution=16, fov_deg=40.0)
        cap = load_captured_scene(fixture_dir)
        v = syn.candidates[3]
        np.testing.assert_array_equal(to_bytes(cap.images[v.id]), to_bytes(syn.images[v.id]))
        assert cap.views[v.id].intrinsics == v.intrinsics
        np.testing.assert_allclose(cap.views[v.id].pose.rotation, v.pose.rotation, atol=1e-14)

    def test_run_on_captured_scene(self, fixture_dir, tmp_path):
        cfg = tmp_path / "cap.cfg"
        cfg.write_text(f"scene.preset = none\nscene.colmap_dir = {fixture_dir}\n"
                       "schedule.initial_views = 2\nschedule.add_every = 2\nschedule.target_views = 3\n"
                       "schedule.total_iters = 4\ncoverage.resolution = 8\nrun.log_every = 2\n")
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["selection_rounds"] == 1 and summary["ause"] is None

    def test_cli_command(self, tmp_path, capsys):
        assert main(["make-fixture", "ring-objects", str(tmp_path / "r"), "--resolution", "8"]) == 0
        assert (tmp_path / "r" / "cameras.txt").is_file()

    def test_unknown_preset(self, tmp_path, capsys):
        assert main(["make-fixture", "moon", str(tmp_path / "m")]) == 2
        assert "moon" in capsys.readouterr().err
