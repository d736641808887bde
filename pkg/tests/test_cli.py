import json

import numpy as np
import pytest

from zbufdepth import cli
from zbufdepth import imageio as io
from zbufdepth import scene as sc


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, _ = run(capsys, *argv)
    return code, json.loads(out)


def test_losses_identity_scene_is_zero(capsys):
    code, rep = run_json(capsys, "losses", "--scene-kind", "identity", "--scene-seed", "1")
    assert code == 0
    assert rep["schema_version"] == 1
    assert all(rep["losses"][k] == 0 for k in ("point", "image", "ssim", "negative_depth", "total"))


def test_losses_report_schema(capsys):
    code, rep = run_json(capsys, "losses", "--scene-kind", "occlusion", "--scene-seed", "0")
    assert code == 0
    for key in ("losses", "zbuffer_iterations", "negative_set_size", "excluded",
                "directions", "weights", "ground_truth"):
        assert key in rep
    assert set(rep["excluded"]) == {"out_of_frame", "negative_in_frame", "occluded"}
    assert rep["weights"] == {"point": 0.005, "image": 10.0, "ssim": 2.0, "negative_depth": 2.0}


@pytest.mark.parametrize("seed", [0, 2, 4])
def test_zbuffer_vs_none_differs_by_occluded_count(capsys, seed):
    args = ("losses", "--scene-kind", "occlusion", "--scene-seed", str(seed))
    _, z = run_json(capsys, *args, "--occlusion", "zbuffer")
    _, n = run_json(capsys, *args, "--occlusion", "none")
    diff = n["losses"]["contributing_counts"]["image"] - z["losses"]["contributing_counts"]["image"]
    assert diff == z["ground_truth"]["occluded"]["total"]
    assert z["excluded"]["occluded"] == diff
    assert n["excluded"]["occluded"] == 0


def test_weight_flags(capsys):
    _, rep = run_json(capsys, "losses", "--scene-kind", "smooth", "--scene-seed", "1",
                      "--lambda1", "0", "--lambda2", "1", "--lambda3", "0", "--lambda4", "0")
    assert rep["losses"]["total"] == pytest.approx(rep["losses"]["image"], rel=1e-12)


def test_text_format_and_out_dir(capsys, tmp_path):
    code, out, _ = run(capsys, "losses", "--scene-kind", "identity", "--format", "text",
                       "--out", str(tmp_path))
    assert code == 0
    assert "schema_version: 1" in out and "losses.total: 0.0" in out
    assert (tmp_path / "losses.txt").read_text().strip() == out.strip()


def test_deterministic_outputs(capsys):
    args = ("zbuf-stats", "--scene-seed", "3")
    assert run(capsys, *args)[1] == run(capsys, *args)[1]


def test_gradcheck_passes(capsys, tmp_path):
    code, rep = run_json(capsys, "gradcheck", "--scene-seed", "2", "--out", str(tmp_path))
    assert code == 0 and rep["passed"]
    assert rep["max_relative_error"] < 1e-4
    g = io.read_gradient((tmp_path / "grad_depth_t.pfm").read_bytes())
    assert g.shape == (18, 24)


def test_gradcheck_corrupted_gradient_fails(capsys):
    code, rep = run_json(capsys, "gradcheck", "--scene-seed", "2", "--corrupt-gradient", "0.01")
    assert code == 1 and not rep["passed"]


def test_gradcheck_zero_weights(capsys):
    code, rep = run_json(capsys, "gradcheck", "--scene-seed", "0", "--lambda1", "0",
                         "--lambda2", "0", "--lambda3", "0", "--lambda4", "0")
    assert code == 0 and rep["max_relative_error"] == 0.0


def test_zbuf_stats_no_collisions(capsys):
    code, rep = run_json(capsys, "zbuf-stats", "--scene-kind", "identity")
    assert code == 0
    for d in rep["directions"]:
        assert d["iterations"] == 1
        assert d["agrees_with_oracle"]
        assert d["multiplicity_histogram"] == {"1": d["points"]}


def test_zbuf_stats_kitti(capsys):
    code, rep = run_json(capsys, "zbuf-stats", "--scene-seed", "5", "--threads", "2")
    assert code == 0
    assert rep["scatter_mode"] == "threaded"
    for d in rep["directions"]:
        assert d["agrees_with_oracle"] and d["iterations"] <= 4
        assert d["round_sizes"][0] == d["points"]
        assert len(d["round_sizes"]) == d["iterations"]


def test_deterministic_env_forces_serial(capsys, monkeypatch):
    monkeypatch.setenv("ZBUF_DETERMINISTIC", "1")
    _, rep = run_json(capsys, "zbuf-stats", "--scene-kind", "identity", "--threads", "4")
    assert rep["scatter_mode"] == "deterministic"


def test_bench(capsys):
    code, rep = run_json(capsys, "bench", "--threads", "4", "--repeats", "2")
    assert code == 0
    assert rep["frame_points"] == 428032
    assert [(r["mode"], r["threads"]) for r in rep["runs"]] == [
        ("deterministic", 1), ("threaded", 1), ("threaded", 4)]
    assert rep["visible_sets_identical"]
    visible = {r["visible"] for r in rep["runs"]}
    assert len(visible) == 1


def test_bench_frame_is_one_point_per_pixel():
    depths, raster, cells = cli.bench_frame(0)
    assert len(depths) == cells == 352 * 1216
    assert raster.min() >= 0 and raster.max() < cells


def test_frames_input(capsys, tmp_path):
    gt = sc.generate(sc.occlusion_band_spec(1))
    io.save_frames(tmp_path, *gt.frames(), gt.pose, gt.intrinsics)
    code, rep = run_json(capsys, "losses", "--frames", str(tmp_path))
    assert code == 0 and "ground_truth" not in rep
    _, direct = run_json(capsys, "losses", "--scene-kind", "occlusion", "--scene-seed", "1")
    assert rep["excluded"] == direct["excluded"]
    assert rep["losses"]["total"] == pytest.approx(direct["losses"]["total"], abs=1e-2)


def test_exit_code_config_errors(capsys, tmp_path):
    assert run(capsys, "losses", "--frames", str(tmp_path / "missing"))[0] == 2
    assert run(capsys, "losses", "--frames", str(tmp_path))[0] == 2
    assert run(capsys, "losses", "--lambda1", "-1")[0] == 2
    assert run(capsys, "losses", "--threads", "0")[0] == 2
    assert run(capsys, "losses", "--scene-kind", "smooth", "--noise", "-1")[0] == 2


def test_exit_code_argparse_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["losses", "--scene-seed", "1", "--frames", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["losses", "--occlusion", "sometimes"])
    assert exc.value.code == 2


def test_exit_code_format_error(capsys, tmp_path):
    gt = sc.generate(sc.smooth_spec(0), visibility=False)
    io.save_frames(tmp_path, *gt.frames(), gt.pose, gt.intrinsics)
    data = (tmp_path / "depth_t.pfm").read_bytes()
    (tmp_path / "depth_t.pfm").write_bytes(data[:-3])
    code, _, err = run(capsys, "losses", "--frames", str(tmp_path))
    assert code == 3 and "at byte" in err


def test_exit_code_internal_error(capsys, monkeypatch):
    def broken(*args, **kwargs):
        from zbufdepth.errors import InternalError
        raise InternalError("repair set did not shrink")
    monkeypatch.setattr(cli, "zbuffer_parallel", broken)
    assert run(capsys, "zbuf-stats", "--scene-kind", "identity")[0] == 4


def test_module_entry_point():
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "zbufdepth", "losses", "--scene-kind",
                           "identity"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["losses"]["total"] == 0.0
    assert np.isfinite(json.loads(proc.stdout)["losses"]["point"])
