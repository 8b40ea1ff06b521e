import csv

import pytest

from mar.cli import main

TINY = """\
n_persons_target = 8
n_persons_aux = 10
n_persons_test = 6
views_target = 2
images_per_person_per_view = 3
d_in = 6
d_out = 4
batch_size = 24
p = 0.05
pretrain_epochs = 2
train_epochs = 3
pretrain_learning_rate = 1
learning_rate = 0.1
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text(TINY)
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_then_train(tmp_path, cfg, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(data)]) == 0
    for name in ("target.txt", "aux.txt", "test.txt", "config.txt"):
        assert (data / name).exists()
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(run)]) == 0
    assert len(_rows(run / "metrics.csv")) == 3
    assert (run / "config.txt").exists() and (run / "encoder.bin").exists()
    assert "seed = 7" in (data / "config.txt").read_text()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run), "--data", str(data)]) == 0
    out = capsys.readouterr().out
    assert "rank1 = " in out and "mAP = " in out
    assert not list(run.glob("*.tmp*"))


def test_config_txt_replays_run(tmp_path, cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--set", "train_epochs=2", "--out", str(a)]) == 0
    assert main(["train", "--config", str(a / "config.txt"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_pretrain_init_and_eval_tags(tmp_path, cfg, capsys):
    pre, run = tmp_path / "pre", tmp_path / "run"
    assert main(["pretrain", "--config", cfg, "--out", str(pre)]) == 0
    assert len(_rows(pre / "metrics.csv")) == 2
    assert main(["train", "--config", cfg, "--init", str(pre), "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run), "--tag", "pretrain", "--per-probe", str(tmp_path / "ap.csv")]) == 0
    assert "rank1" in capsys.readouterr().out
    assert len(_rows(tmp_path / "ap.csv")) > 0


def test_mine_report(tmp_path, cfg):
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run)]) == 0
    out = tmp_path / "mr.csv"
    assert main(["mine-report", "--checkpoint", str(run), "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["pair_i", "pair_j", "similarity", "agreement", "set"]
    assert len(rows) == 12 * 11 // 2
    assert {r["set"] for r in rows} <= {"P", "N", "none"}
    assert sum(r["set"] != "none" for r in rows) == 3  # rank of p=0.05 over 66 pairs


def test_sweep(tmp_path, cfg):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--set", "train_epochs=1", "--param", "n_persons_aux",
                 "--values", "4,6", "--out", str(out)]) == 0
    rows = _rows(out / "sweep.csv")
    assert [r["value"] for r in rows] == ["4", "6"]
    assert (out / "n_persons_aux=4" / "config.txt").exists()
    assert (out / "config.txt").exists()


def test_exit_codes(tmp_path, cfg, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", str(tmp_path), "--bogus"])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--set", "no_such_key=1", "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y")]) == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "target.txt").write_text("dim = 6\ndomain = target\ncount = 5\n")
    (bad / "aux.txt").write_text("dim = 6\ndomain = aux\ncount = 0\n")
    assert main(["train", "--config", cfg, "--data", str(bad), "--out", str(tmp_path / "z")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit(tmp_path, cfg):
    code = main(["train", "--config", cfg, "--set", "pretrain_learning_rate=1e200", "--set", "clip_norm=0",
                 "--out", str(tmp_path / "nan")])
    assert code == 3
