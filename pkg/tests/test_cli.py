from __future__ import annotations

import subprocess
import sys

import pytest

from nshape.cli import main, read_results


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--scene", "sphere", "--views", "4", "--size", "16", "--mesh-res", "48",
                 "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--steps", "3", "--rays", "8",
                 "--samples", "8", "--shaping", "none"]) == 0
    return out


def _train(data_dir, out, *extra):
    return main(["train", "--data", str(data_dir), "--out", str(out), "--steps", "4", "--rays", "8",
                 "--samples", "8", "--warmup", "1", "--jacobian-samples", "0", *extra])


class TestGen:
    def test_missing_out_is_usage_error(self, capsys):
        assert main(["gen", "--scene", "sphere"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_same_seed_same_manifest(self, data_dir, tmp_path):
        assert main(["gen", "--scene", "sphere", "--views", "4", "--size", "16", "--mesh-res", "48",
                     "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "manifest.txt").read_bytes() == (data_dir / "manifest.txt").read_bytes()

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen", "--scene", "sphere", "--views", "1", "--size", "8", "--mesh-res", "8",
                     "--out", str(blocker / "sub")]) == 2

    def test_unknown_scene(self):
        with pytest.raises(SystemExit) as info:
            main(["gen", "--scene", "teapot", "--out", "x"])
        assert info.value.code == 1


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "checkpoint.nshape").is_file()
        lines = (trained / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,L_C,L_E,L_M,total,seconds"

    def test_none_equals_normal_at_zero_weight(self, data_dir, tmp_path):
        assert _train(data_dir, tmp_path / "a", "--shaping", "none") == 0
        assert _train(data_dir, tmp_path / "b", "--shaping", "normal", "--lambda-m", "0") == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_threads_identical(self, data_dir, tmp_path):
        assert _train(data_dir, tmp_path / "a", "--shaping", "normal", "--beta-g", "0.9",
                      "--threads", "1") == 0
        assert _train(data_dir, tmp_path / "b", "--shaping", "normal", "--beta-g", "0.9",
                      "--threads", "2") == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_invalid_shaping(self, data_dir, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--shaping", "curvature"])
        assert info.value.code == 1

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_resume(self, data_dir, tmp_path):
        assert _train(data_dir, tmp_path / "full") == 0
        common = ["train", "--data", str(data_dir), "--out", str(tmp_path / "part"), "--rays", "8",
                  "--samples", "8", "--warmup", "1", "--jacobian-samples", "0"]
        assert main(common + ["--steps", "2"]) == 0
        assert main(common + ["--steps", "4", "--resume"]) == 0
        # the interrupted run also logged its own last step; every uninterrupted row must match
        full = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        part = (tmp_path / "part" / "metrics.csv").read_text().splitlines()
        assert set(full) <= set(part) and full[-1] == part[-1]
        assert (tmp_path / "full" / "checkpoint.nshape").read_bytes() == \
            (tmp_path / "part" / "checkpoint.nshape").read_bytes()


class TestConfig:
    def test_flags_override_file(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("lambda_m=0.5\nsteps=7\n")
        assert main(["train", "--config", str(tmp_path / "c.txt"), "--lambda-m", "0.2", "--print-config"]) == 0
        out = capsys.readouterr().out
        assert "lambda_m=0.2\n" in out and "steps=7\n" in out

    def test_bad_config_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("wibble=1\n")
        assert main(["train", "--config", str(tmp_path / "c.txt"), "--print-config"]) == 1


class TestMeshEvalRender:
    def test_mesh_and_self_eval(self, trained, data_dir, tmp_path, capsys):
        assert main(["mesh", "--ckpt", str(trained / "checkpoint.nshape"), "--res", "32",
                     "--out", str(tmp_path / "m.ply")]) == 0
        capsys.readouterr()
        assert main(["eval", "--pred", str(tmp_path / "m.ply"), "--gt", str(tmp_path / "m.ply"),
                     "--samples", "2000"]) == 0
        header, row = capsys.readouterr().out.strip().splitlines()[-2:]
        vals = dict(zip(header.split(","), row.split(",")))
        assert float(vals["chamfer"]) == 0.0 and float(vals["fscore"]) == 1.0
        assert float(vals["tau"]) > 0

    def test_eval_defaults(self, capsys):
        assert main(["eval", "--print-config"]) == 0
        out = capsys.readouterr().out
        assert "samples=50000\n" in out and "tau_frac=0.02\n" in out

    def test_degenerate_resolution(self, trained, tmp_path):
        assert main(["mesh", "--ckpt", str(trained / "checkpoint.nshape"), "--res", "2",
                     "--out", str(tmp_path / "m.ply")]) == 0

    def test_unreadable_checkpoint(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"garbage")
        assert main(["mesh", "--ckpt", str(tmp_path / "bad"), "--res", "8", "--out", str(tmp_path / "m.ply")]) == 2

    def test_render(self, trained, data_dir, tmp_path):
        args = ["render", "--ckpt", str(trained / "checkpoint.nshape"), "--data", str(data_dir),
                "--pose-index", "1", "--samples", "16"]
        assert main(args + ["--out", str(tmp_path / "a.ppm")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.ppm")]) == 0
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_render_bad_pose(self, trained, data_dir, tmp_path):
        assert main(["render", "--ckpt", str(trained / "checkpoint.nshape"), "--data", str(data_dir),
                     "--pose-index", "9", "--out", str(tmp_path / "x.ppm")]) == 1


class TestVerifyMI:
    def test_too_few_samples(self):
        assert main(["verify-mi", "--samples", "100"]) == 3

    def test_deterministic_report(self, tmp_path):
        args = ["verify-mi", "--dim", "3", "--samples", "20000", "--seed", "4"]
        code_a = main(args + ["--out", str(tmp_path / "a.tsv")])
        code_b = main(args + ["--out", str(tmp_path / "b.tsv")])
        assert code_a == code_b
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


class TestExperimentReport:
    def test_small_grid(self, tmp_path):
        out = tmp_path / "exp"
        args = ["experiment", "--scene", "sphere", "--views", "2", "--size", "16", "--seeds", "0",
                "--shapings", "none", "normal", "--steps", "2", "--res", "24", "--samples", "1000",
                "--out", str(out)]
        assert main(args) == 0
        rows = read_results(out / "results.csv")
        assert [r["shaping"] for r in rows] == ["none", "normal"]
        # two steps shrink the init sphere inside the ground truth; it scores as a total miss
        assert all(r["chamfer"] > 0 and 0 <= r["fscore"] <= 1 for r in rows)
        first = (out / "results.csv").read_bytes()
        assert main(args) == 0  # cached runs are reused
        assert (out / "results.csv").read_bytes() == first
        assert main(["report", "--results", str(out)]) == 0
        rep = out / "report"
        assert (rep / "summary.csv").is_file()
        assert (rep / "chamfer.png").stat().st_size > 0 and (rep / "losses.png").stat().st_size > 0

    def test_report_missing_results(self, tmp_path):
        assert main(["report", "--results", str(tmp_path)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nshape", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify-mi" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "nshape"], capture_output=True, text=True)
    assert proc.returncode == 1
