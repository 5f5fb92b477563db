import csv

import pytest

from biatten.cli import main
from biatten.data import save_image, synth_fixture

TINY = ["--epochs", "1", "--channels", "4", "--depth", "1", "--hidden", "8", "--stride", "32"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    assert main(["fixture", "--out", str(root), "--contents", "15", "--per-content", "2", "--size", "64"]) == 0
    return root / "synth.csv"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--deterministic", *TINY]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_outputs(trained):
    for name in ("model.biat", "model.json", "train_log.csv", "config.ini"):
        assert (trained / name).is_file()
    log = _rows(trained / "train_log.csv")
    assert log[0] == ["epoch", "mean_l1", "seconds"] and len(log) == 2
    assert "channels = 4" in (trained / "config.ini").read_text()


@pytest.mark.parametrize("subset, n", [("all", 30), ("test", 6), ("train", 24)])
def test_eval_subsets(dataset, trained, tmp_path, subset, n):
    code = main(["eval", "--checkpoint", str(trained / "model.biat"), "--data", str(dataset), "--subset", subset, "--out", str(tmp_path)])
    assert code == 0
    preds = _rows(tmp_path / "predictions.csv")
    assert preds[0] == ["image_index", "pred", "mos"] and len(preds) == n + 1
    report = _rows(tmp_path / "report.csv")
    assert report[1][:3] == ["synth", "Bidirectional", str(n)]


def test_probe_writes_maps(dataset, trained, tmp_path):
    root = dataset.parent
    code = main(["probe", "--checkpoint", str(trained / "model.biat"), "--hr", str(root / "hr/c000.png"), "--sr", str(root / "sr/c000_00.png"), "--out", str(tmp_path)])
    assert code == 0
    assert len(list(tmp_path.glob("*_attention.png"))) == 4
    assert len(_rows(tmp_path / "probe.csv")) == 9


def test_metrics_command(dataset, tmp_path, capsys):
    root = dataset.parent
    assert main(["metrics", "--hr", str(root / "hr/c000.png"), "--sr", str(root / "hr/c000.png"), "--out", str(tmp_path)]) == 0
    row = _rows(tmp_path / "metrics.csv")[1]
    assert float(row[2]) == 99.0 and float(row[3]) == 1.0
    assert "PSNR 99.0000 dB" in capsys.readouterr().out


def test_ablate_writes_table(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), "--deterministic", *TINY]) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert [r[1] for r in rows[1:]] == ["w/o BAB", "HR→SR", "SR→HR", "with BAB"]
    for mode in ("NoBAB", "HRtoSR", "SRtoHR", "Bidirectional"):
        assert (tmp_path / mode / "model.biat").is_file()


def test_config_error_exit_code(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--set", "model.bogus=1"]) == 2
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = lots\n")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(cfg)]) == 2


def test_missing_dataset_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o"), *TINY]) == 3


def test_corrupt_checkpoint_exit_code(dataset, trained, tmp_path):
    bad = tmp_path / "model.biat"
    blob = (trained / "model.biat").read_bytes()
    bad.write_bytes(b"JUNK" + blob[4:])
    (tmp_path / "model.json").write_bytes((trained / "model.json").read_bytes())
    assert main(["eval", "--checkpoint", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 4
    bad.write_bytes(blob[: len(blob) // 2])
    assert main(["eval", "--checkpoint", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 4


def test_mismatched_sizes_exit_code(tmp_path):
    fx = synth_fixture(0, 1, 1, size=48)
    save_image(tmp_path / "a.png", fx.images["hr/c000.png"])
    save_image(tmp_path / "b.png", synth_fixture(0, 1, 1, size=40).images["hr/c000.png"])
    assert main(["metrics", "--hr", str(tmp_path / "a.png"), "--sr", str(tmp_path / "b.png")]) == 3


def test_eval_config_model_mismatch(dataset, trained, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nchannels = 16\n")
    code = main(["eval", "--checkpoint", str(trained / "model.biat"), "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 4


def test_verbose_flag_either_side(dataset, tmp_path):
    assert main(["-v", "train", "--data", str(dataset), "--out", str(tmp_path / "a"), "--epochs", "0", "--channels", "4", "--depth", "1", "--hidden", "8"]) == 0
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "b"), "--epochs", "0", "--channels", "4", "--depth", "1", "--hidden", "8", "-v"]) == 0
