import numpy as np
import pytest

from polsar_rlrmf import cli
from polsar_rlrmf.data import FeatureImage, LabelMap
from polsar_rlrmf.formats import load_labels, load_raster, read_ppm, save_labels, save_raster
from polsar_rlrmf.rlrmf import EmError

SMALL = ["--height", "24", "--width", "24", "--granularity", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestSeeds:
    def test_stage_seed_is_stable_and_distinct(self):
        assert cli.stage_seed(7, "train") == cli.stage_seed(7, "train")
        assert cli.stage_seed(7, "train") != cli.stage_seed(7, "denoise")
        assert cli.stage_seed(7, "train") != cli.stage_seed(8, "train")
        assert 0 <= cli.stage_seed(0, "synth") < 2**32


class TestConfig:
    def test_flag_overrides_file(self, tmp_path):
        cfgfile = tmp_path / "c.cfg"
        cfgfile.write_text("# scene\nheight = 20\nwidth=30\nsignature_scale=0.7\n")
        out = tmp_path / "n.pfc"
        assert run("synth", "--config", cfgfile, "--width", 16, "--granularity", 6,
                   "--out-noisy", out, "--out-truth", tmp_path / "t.plm") == 0
        assert load_raster(out).data.shape == (20, 16, 9)

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.cfg"
        cfgfile.write_text("windw=7\n")
        code = run("synth", "--config", cfgfile, "--out-noisy", tmp_path / "a", "--out-truth", tmp_path / "b")
        assert code == cli.EXIT_VALIDATION
        assert "windw" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        assert run("synth", "--height", "tall", "--out-noisy", tmp_path / "a",
                   "--out-truth", tmp_path / "b") == cli.EXIT_VALIDATION


class TestErrors:
    def test_missing_input_is_io(self, tmp_path, capsys):
        code = run("render", "--labels", tmp_path / "nope.plm", "--out", tmp_path / "x.ppm")
        assert code == cli.EXIT_IO
        assert "[render]" in capsys.readouterr().err

    def test_bad_magic_is_io(self, tmp_path):
        (tmp_path / "x.plm").write_bytes(b"JUNK" + bytes(20))
        assert run("render", "--labels", tmp_path / "x.plm", "--out", tmp_path / "x.ppm") == cli.EXIT_IO

    def test_missing_output_dir_is_io(self, tmp_path):
        save_labels(LabelMap(np.ones((2, 2), dtype=int), 1), tmp_path / "a.plm")
        assert run("render", "--labels", tmp_path / "a.plm", "--out", tmp_path / "no" / "x.ppm") == cli.EXIT_IO

    def test_numerical_failure(self, tmp_path, monkeypatch):
        save_labels(LabelMap(np.ones((2, 2), dtype=int), 1), tmp_path / "a.plm")

        def boom(cfg):
            raise EmError("diverged", 3)

        monkeypatch.setitem(cli.HANDLERS, "render", boom)
        assert run("render", "--labels", tmp_path / "a.plm", "--out", tmp_path / "x.ppm") == cli.EXIT_NUMERICAL

    def test_validation_error_names_stage(self, tmp_path, capsys):
        save_raster(FeatureImage(np.ones((4, 4, 9))), tmp_path / "f.pfc")
        code = run("denoise", "--in", tmp_path / "f.pfc", "--out", tmp_path / "o.pfc", "--window", 4)
        assert code == cli.EXIT_VALIDATION
        assert "[denoise]" in capsys.readouterr().err

    def test_classify_needs_model(self, tmp_path):
        save_raster(FeatureImage(np.ones((4, 4, 9))), tmp_path / "f.pfc")
        assert run("classify", "--features", tmp_path / "f.pfc", "--out-labels", tmp_path / "l.plm") == cli.EXIT_IO


class TestStages:
    def test_render_pixel_count(self, tmp_path):
        save_labels(LabelMap(np.arange(15).reshape(3, 5) % 4, 3), tmp_path / "a.plm")
        assert run("render", "--labels", tmp_path / "a.plm", "--out", tmp_path / "a.ppm") == 0
        rgb = read_ppm(tmp_path / "a.ppm")
        assert rgb.shape[0] * rgb.shape[1] == 15

    def test_synth_normalize_denoise_trace(self, tmp_path):
        assert run("synth", *SMALL, "--out-noisy", tmp_path / "n.pfc", "--out-truth", tmp_path / "t.plm") == 0
        assert run("normalize", "--in", tmp_path / "n.pfc", "--out", tmp_path / "f.pfc") == 0
        f = load_raster(tmp_path / "f.pfc")
        assert f.data.min() == 0.0 and f.data.max() == 1.0
        assert run("denoise", "--in", tmp_path / "f.pfc", "--out", tmp_path / "d.pfc", "--window", 5,
                   "--trace", tmp_path / "tr.csv", "--trace-pixel", "3,4", "--threads", 2) == 0
        assert load_raster(tmp_path / "d.pfc").data.shape == f.data.shape
        lines = (tmp_path / "tr.csv").read_text().splitlines()
        assert lines[0] == "iteration,loglik,K"
        ll = [float(x.split(",")[1]) for x in lines[1:]]
        assert all(b >= a - 1e-8 for a, b in zip(ll, ll[1:]))

    def test_eval_prints_table(self, tmp_path, capsys):
        save_labels(LabelMap(np.array([[1, 2], [2, 2]]), 2), tmp_path / "t.plm")
        save_labels(LabelMap(np.array([[1, 1], [2, 2]]), 2), tmp_path / "p.plm")
        assert run("eval", "--truth", tmp_path / "t.plm", "--pred", f"mine={tmp_path / 'p.plm'}",
                   "--out", tmp_path / "r.csv") == 0
        assert "mine" in capsys.readouterr().out
        assert (tmp_path / "r.csv").read_text().splitlines()[1].startswith("mine,75.0000")

    def test_run_all_small_is_deterministic(self, tmp_path):
        args = ["run-all", "--seed", 3, *SMALL, "--window", 5, "--fraction", 0.1, "--epochs", 2]
        assert run(*args, "--out-dir", tmp_path / "a") == 0
        assert run(*args, "--out-dir", tmp_path / "b") == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert {"report.csv", "rlrmf-cnn-mrf.plm", "features_rlrmf.pfc", "train_log_raw.csv"} <= set(files)
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        train = load_labels(tmp_path / "a" / "train.plm")
        assert 0 < np.count_nonzero(train.labels) < train.labels.size
