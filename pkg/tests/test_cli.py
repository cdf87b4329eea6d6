import json

import numpy as np
import pytest

from distill3d import cli, fields, scenes, tetmesh
from distill3d.fields import save_grid3
from distill3d.tetmesh import export_mesh, marching_tets

from test_pipeline import tiny_config


class TestExitCodes:
    def test_missing_config_exits_1(self, tmp_path, capsys):
        code = cli.main(["generate", "--config", str(tmp_path / "absent.json")])
        assert code == 1
        assert "absent.json" in capsys.readouterr().err

    def test_unknown_flag_exits_1(self, capsys):
        code = cli.main(["generate", "--config", "x", "--bogus"])
        assert code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_exits_1(self):
        assert cli.main(["frobnicate"]) == 1

    def test_check_exits_0(self, capsys):
        assert cli.main(["check"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_runtime_failure_exits_2(self, tmp_path, capsys):
        # One stage-1 step cannot push the density through an absurd iso level:
        # the handoff raises, which is a runtime failure, not a config error.
        path = tiny_config(tmp_path, stage1={"iters": 1, "render_size": 24,
                                             "ray_steps": 24, "grid_resolution": 12},
                           stage2={"iso": 500.0, "tet_resolution": 10,
                                   "geometry_iters": 1, "texture_iters": 1,
                                   "render_size": 24, "codec": "identity",
                                   "patches": 4})
        code = cli.main(["generate", "--config", str(path)])
        assert code == 2
        assert "no surface" in capsys.readouterr().err


class TestGenerateCommand:
    def test_full_run_artifacts(self, tmp_path, capsys):
        path = tiny_config(tmp_path)
        code = cli.main(["generate", "--config", str(path)])
        assert code == 0
        out = tmp_path / "out"
        for name in ("mesh.obj", "mesh.ply", "metrics.jsonl"):
            assert (out / name).is_file()
        assert len(list(out.glob("turntable_*.png"))) >= 8

    def test_stage1_then_stage2(self, tmp_path):
        path = tiny_config(tmp_path)
        assert cli.main(["stage1", "--config", str(path)]) == 0
        ckpt = tmp_path / "out" / "checkpoints" / "stage1_final"
        assert cli.main(["stage2", "--config", str(path), "--from", str(ckpt)]) == 0
        assert (tmp_path / "out" / "mesh.obj").is_file()


class TestRenderCommand:
    def test_turntable_from_artifacts(self, tmp_path):
        grid = tetmesh.build_tet_grid(10)
        grid.sdf = scenes.sphere_sdf(grid.vertices, 0.5)
        mesh = marching_tets(grid)
        export_mesh(mesh, tmp_path / "m.obj")
        save_grid3(fields.Grid3.full(8, 3, 0.5), tmp_path / "tex.grid3")
        code = cli.main(["render", "--mesh", str(tmp_path / "m.obj"),
                         "--texture", str(tmp_path / "tex.grid3"),
                         "--out", str(tmp_path / "views"), "--size", "48",
                         "--views", "4"])
        assert code == 0
        assert len(list((tmp_path / "views").glob("turntable_*.png"))) == 4

    def test_missing_mesh_exits_1(self, tmp_path):
        code = cli.main(["render", "--mesh", str(tmp_path / "nope.obj"),
                         "--texture", str(tmp_path / "nope.grid3")])
        assert code == 1


class TestReportCommand:
    def test_report_writes_figures_and_csv(self, tmp_path):
        metrics = tmp_path / "metrics.jsonl"
        rows = []
        for i in range(30):
            rows.append(json.dumps({
                "step": i, "stage": "nerf", "rule": "zero123_sds", "t": 100 + i,
                "weight": 0.5, "residual_norm": 10.0 / (i + 1),
                "grad_norms": {"density": 1.0 / (i + 1), "color": 0.5 / (i + 1)},
                "holdout_mse": 0.1 / (i + 1)}))
        metrics.write_text("\n".join(rows) + "\n")
        code = cli.main(["report", "--metrics", str(metrics),
                         "--out", str(tmp_path / "rep")])
        assert code == 0
        rep = tmp_path / "rep"
        assert (rep / "residual_norm.png").is_file()
        assert (rep / "grad_norms.png").is_file()
        assert (rep / "holdout_mse.png").is_file()
        summary = (rep / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("stage,rule,steps")
        assert any("nerf,zero123_sds,30" in line for line in summary[1:])

    def test_bad_metrics_exits_1(self, tmp_path):
        bad = tmp_path / "m.jsonl"
        bad.write_text("{not json\n")
        assert cli.main(["report", "--metrics", str(bad)]) == 1
