import numpy as np
import pytest

from flowsr.cli import main
from flowsr.fld import fld_write
from flowsr.train import load_checkpoint

TINY = ["--channels", "6", "--feu-per-ffb", "1", "--ffb-count", "1", "--window", "4", "--heads", "2",
        "--dfc-k", "3", "--batch", "2", "--lr-crop", "8", "--eval-every", "0"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(root), "--train-count", "3", "--test-count", "2", "--size", "16",
                 "--scales", "2,4"]) == 0
    return root


def test_gen_data_layout(data):
    assert (data / "train" / "manifest.txt").exists()
    assert (data / "test" / "test00001_lr4.fld").exists()


def test_train_then_eval(data, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), *TINY, "--iterations", "3", "--out", str(run), "--quiet"]) == 0
    assert (run / "checkpoint" / "manifest.txt").exists()
    assert (run / "loss.png").stat().st_size > 0
    assert len((run / "train_log.txt").read_text().splitlines()) == 3
    capsys.readouterr()
    assert main(["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint"), "--ema",
                 "--out", str(tmp_path / "rep"), "--figure"]) == 0
    out = capsys.readouterr().out
    assert "PSNR" in out and "test00000" in out
    assert (tmp_path / "rep" / "eval_model_ema.csv").exists()
    assert list((tmp_path / "rep").glob("compare_*.png"))


def test_eval_reference_modes(data, capsys):
    assert main(["eval", "--data", str(data), "--mode", "oracle", "--summary"]) == 0
    assert "99.0000" in capsys.readouterr().out
    assert main(["eval", "--data", str(data), "--mode", "bicubic", "--scale", "4"]) == 0


def test_config_file_precedence(data, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("iterations=2\nnet.qsm_enabled=False\ntrain.lr=0.002\n")
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), *TINY, "--config", str(cfg), "--lr", "0.001",
                 "--out", str(run), "--quiet"]) == 0
    ck = load_checkpoint(run / "checkpoint")
    assert ck.step == 2 and ck.net.qsm_enabled is False
    assert ck.train.lr == 0.001  # explicit flag beats the file


def test_conv_and_qsm_shorthands(data, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), *TINY, "--iterations", "1", "--conv", "none", "--qsm", "off",
                 "--out", str(run), "--quiet"]) == 0
    ck = load_checkpoint(run / "checkpoint")
    assert ck.net.conv_variant == "none" and not ck.net.qsm_enabled


def test_errors_print_code_and_exit_nonzero(data, tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path / "missing"), "--mode", "bicubic"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    assert main(["train", "--data", str(data), *TINY, "--ema-decay", "1.5", "--out", str(tmp_path / "r")]) == 1
    assert capsys.readouterr().err.startswith("error: config")
    assert main(["eval", "--data", str(data), "--checkpoint", str(tmp_path)]) == 1
    assert main(["train", "--data", str(data), "--conv", "bogus"]) == 2
    assert main([]) == 2


def test_export_png(tmp_path, capsys):
    src = tmp_path / "img.fld"
    fld_write(np.full((3, 4, 4), 0.5, dtype=np.float32), src)
    assert main(["export-png", str(src), str(tmp_path / "img.png")]) == 0
    assert (tmp_path / "img.png").exists()
    fld_write(np.full((3, 4, 4), 1.5, dtype=np.float32), src)
    assert main(["export-png", str(src), str(tmp_path / "bad.png")]) == 1
    assert "error: " in capsys.readouterr().err
    assert main(["export-png", "--clamp", str(src), str(tmp_path / "ok.png")]) == 0


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--seeds", "2", "add", "tanh"]) == 0
    assert "2/2 passed" in capsys.readouterr().out
