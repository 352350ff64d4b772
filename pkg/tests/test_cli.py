import csv

import numpy as np
import pytest

from dnet.cli import main
from dnet.model import load_checkpoint
from dnet.pnm import read_pnm


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train -> predict once; several tests inspect the results."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run_cli("synth", "--seed", 5, "--n", 3, "--height", 32, "--width", 32,
                   "--out", data) == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        "d1 = 1\nd2 = 2\nd3 = 4\nmsif = on\nmsif_rates = 3,6,12\n"
        "lr = 2e-3\nmax_iter = 30\nbatch = 2\nseed = 3\nchannels_scale = 0.0625\n"
    )
    run_dir = root / "run"
    assert run_cli("train", "--config", cfg, "--manifest", data / "manifest.txt",
                   "--out", run_dir) == 0
    preds = root / "preds"
    for i in range(3):
        assert run_cli("predict", "--checkpoint", run_dir / "checkpoint.dnet",
                       "--image", data / f"img_{i:03d}.ppm", "--out", preds) == 0
    return root


class TestPipeline:
    def test_synth_outputs_decode(self, workspace):
        data = workspace / "data"
        img = read_pnm(data / "img_000.ppm")
        mask = read_pnm(data / "img_000.pgm")
        assert img.shape == (32, 32, 3)
        assert mask.shape == (32, 32)

    def test_train_wrote_checkpoint_and_trace(self, workspace):
        run_dir = workspace / "run"
        model = load_checkpoint(run_dir / "checkpoint.dnet")
        assert model.cfg.dilations == (1, 2, 4)
        rows = read_csv(run_dir / "loss.csv")
        assert len(rows) == 30
        assert float(rows[0]["lr"]) == pytest.approx(2e-3)

    def test_predict_outputs(self, workspace):
        preds = workspace / "preds"
        prob = read_pnm(preds / "img_000.prob.pgm")
        mask = read_pnm(preds / "img_000.mask.pgm")
        assert prob.shape == (32, 32)
        assert mask.shape == (32, 32)
        assert set(np.unique(mask)).issubset({0.0, 1.0})

    def test_eval_on_predictions(self, workspace):
        out = workspace / "eval"
        assert run_cli("eval", "--pred", workspace / "preds", "--gt",
                       workspace / "data", "--out", out) == 0
        rows = {r["name"]: float(r["value"]) for r in read_csv(out / "metrics.csv")}
        assert set(rows) == {
            "accuracy", "precision", "recall", "specificity", "f1", "auc_roc", "auc_pr"
        }
        roc = read_csv(out / "roc.csv")
        assert roc[0]["fpr"] == "0" and roc[-1]["tpr"] == "1"

    def test_eval_perfect_when_pred_equals_gt(self, workspace, capsys):
        out = workspace / "eval_self"
        assert run_cli("eval", "--pred", workspace / "data", "--gt",
                       workspace / "data", "--out", out) == 0
        rows = {r["name"]: float(r["value"]) for r in read_csv(out / "metrics.csv")}
        assert rows["accuracy"] == 1.0
        assert rows["f1"] == 1.0

    def test_eval_with_fov_restriction(self, workspace, tmp_path):
        from dnet.pnm import write_mask_pgm

        fov_dir = tmp_path / "fov"
        fov_dir.mkdir()
        fov = np.zeros((32, 32))
        fov[8:24, 8:24] = 1.0
        for i in range(3):
            write_mask_pgm(fov_dir / f"img_{i:03d}.pgm", fov)
        out = tmp_path / "eval_fov"
        assert run_cli("eval", "--pred", workspace / "data", "--gt", workspace / "data",
                       "--fov", fov_dir, "--out", out) == 0
        rows = {r["name"]: float(r["value"]) for r in read_csv(out / "metrics.csv")}
        assert rows["accuracy"] == 1.0  # 16x16 window only, still perfect

    def test_predict_deterministic(self, workspace, tmp_path):
        run_dir = workspace / "run"
        for out in (tmp_path / "a", tmp_path / "b"):
            assert run_cli("predict", "--checkpoint", run_dir / "checkpoint.dnet",
                           "--image", workspace / "data" / "img_001.ppm",
                           "--out", out) == 0
        a = (tmp_path / "a" / "img_001.prob.pgm").read_bytes()
        b = (tmp_path / "b" / "img_001.prob.pgm").read_bytes()
        assert a == b


class TestTrainSynthMode:
    def test_synth_training_writes_loadable_checkpoint(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("max_iter = 3\nchannels_scale = 0.03125\nbatch = 2\n")
        out = tmp_path / "out"
        assert run_cli("train", "--config", cfg, "--synth", 4,
                       "--synth-size", 32, "--out", out) == 0
        model = load_checkpoint(out / "checkpoint.dnet")
        assert model.cfg.msif_enabled

    def test_requires_exactly_one_source(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("max_iter = 1\n")
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "o") == 1
        assert capsys.readouterr().err.startswith("error: config:")


class TestRFAnalyze:
    def test_two_layer_stack_file(self, tmp_path, capsys):
        layers = tmp_path / "layers.txt"
        layers.write_text("conv 5 1 1\nconv 9 1 1\n")
        assert run_cli("rf-analyze", "--layers", layers) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "layer,k_eff,jump,rf"
        assert out[-2].endswith(",13")  # final rf 13
        assert out[-1] == "coverage=dense"

    def test_coverage_holes_reported(self, tmp_path, capsys):
        layers = tmp_path / "layers.txt"
        layers.write_text("conv 3 1 2\nconv 3 1 2\nconv 3 1 2\n")
        assert run_cli("rf-analyze", "--layers", layers) == 0
        verdict = capsys.readouterr().out.strip().splitlines()[-1]
        assert verdict.startswith("coverage=holes:")
        assert "1" in verdict.split(":", 1)[1]

    def test_config_derived_encoder_path(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("d1 = 1\nd2 = 2\nd3 = 4\n")
        out_file = tmp_path / "rf.csv"
        assert run_cli("rf-analyze", "--config", cfg, "--out", out_file) == 0
        lines = out_file.read_text().strip().splitlines()
        assert lines[0] == "layer,k_eff,jump,rf"
        assert lines[-1] == "coverage=dense"
        assert len(lines) == 1 + 49 + 1  # header + layers + verdict

    def test_bad_layers_file(self, tmp_path, capsys):
        layers = tmp_path / "layers.txt"
        layers.write_text("conv three 1 1\n")
        assert run_cli("rf-analyze", "--layers", layers) == 1
        assert capsys.readouterr().err.startswith("error: config:")


class TestErrorPaths:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code = run_cli("predict", "--checkpoint", tmp_path / "nope.dnet",
                       "--image", tmp_path / "nope.ppm", "--out", tmp_path)
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error: not-found:")

    def test_bad_arguments_exit_one(self, capsys):
        assert run_cli("train") == 1
        assert capsys.readouterr().err.startswith("error: config: arguments:")

    def test_error_lines_are_single_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P5\n2 2\n255\nxx")  # truncated
        gt = tmp_path / "gt"
        gt.mkdir()
        preds = tmp_path / "p"
        preds.mkdir()
        (preds / "bad.pgm").write_bytes(bad.read_bytes())
        (gt / "bad.pgm").write_bytes(bad.read_bytes())
        assert run_cli("eval", "--pred", preds, "--gt", gt, "--out", tmp_path / "o") == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: pnm:")
        assert "\n" not in err
