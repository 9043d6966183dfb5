import pytest

from sef import data
from sef.analysis import read_pnm
from sef.cli import main


def test_params_command(capsys):
    assert main(["params", "--channels", "2048", "--classes", "200", "--groups", "4"]) == 0
    assert capsys.readouterr().out.strip() == "409600"


def test_score_command_bundled(capsys):
    assert main(["score"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 13
    assert "SEF\t4.8" in lines and "Cross-X\t2.8" in lines


def test_score_command_file(tmp_path, capsys):
    p = tmp_path / "t.csv"
    p.write_text("method,a,b\nx,90,\ny,80,70\n")
    assert main(["score", str(p), "--out", str(tmp_path / "s.csv")]) == 0
    assert capsys.readouterr().out.splitlines() == ["x\t1.0", "y\t1.5"]
    assert (tmp_path / "s.csv").read_text().startswith("method,score,a,b\n")


@pytest.mark.parametrize("argv", [[], ["bogus"], ["params", "--channels", "x"], ["score", "--nope"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    captured = capsys.readouterr()
    assert "usage" in captured.err and captured.out == ""


def test_runtime_error_exit_two(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing.sefw"), str(tmp_path / "x.sefd")]) == 2
    assert "missing.sefw" in capsys.readouterr().err


def test_bad_config_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense=1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gen_data_writes_readable_files(tmp_path, capsys):
    assert main(["gen-data", str(tmp_path), "--seed", "2"]) == 0
    tr = data.read_dataset(tmp_path / "train.sefd")
    te = data.read_dataset(tmp_path / "test.sefd")
    assert (len(tr), len(te)) == (2048, 1024)
    ref, _ = data.generate_full(data.SynthSpec(seed=2))
    assert tr.equals(ref)


@pytest.fixture
def trained_files(tmp_path, tiny_sets):
    tr, val, te = tiny_sets
    data.write_dataset(tr, tmp_path / "train.sefd")
    data.write_dataset(te, tmp_path / "test.sefd")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"epochs=1\nbatch_size=8\nclasses=4\nchannels=8\n"
                   f"train_path={tmp_path / 'train.sefd'}\ntest_path={tmp_path / 'test.sefd'}\n")
    return tmp_path, cfg


def test_train_eval_and_diagnostics(trained_files, capsys):
    d, cfg = trained_files
    ckpt, hist = d / "m.sefw", d / "h.csv"
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(ckpt),
                 "--history", str(hist)]) == 0
    out = capsys.readouterr()
    assert out.out.startswith("test_accuracy\t") and "epoch 0" in out.err
    assert hist.read_text().splitlines()[0].startswith("epoch,lr,val_accuracy")

    assert main(["eval", str(ckpt), str(d / "test.sefd")]) == 0
    acc = float(capsys.readouterr().out)
    assert 0 <= acc <= 1

    assert main(["correlations", str(ckpt), str(d / "test.sefd"), "--samples", "8",
                 "--csv", str(d / "c.csv"), "--pgm", str(d / "c.pgm")]) == 0
    assert capsys.readouterr().out.startswith("block_gap\t")
    assert read_pnm(d / "c.pgm")[1].shape == (8, 8)

    assert main(["activations", str(ckpt), str(d / "test.sefd"), str(d / "maps"), "--count", "2"]) == 0
    paths = capsys.readouterr().out.split()
    assert len(paths) == 8
    assert read_pnm(paths[1])[1].shape == (16, 16, 3)


def test_train_needs_no_test_split(tmp_path, tiny_sets, capsys):
    data.write_dataset(tiny_sets[0], tmp_path / "train.sefd")
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"epochs=1\nclasses=4\nchannels=8\ntrain_path={tmp_path / 'train.sefd'}\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out == ""


def test_ablate_requires_test_split(tmp_path, tiny_sets, capsys):
    data.write_dataset(tiny_sets[0], tmp_path / "train.sefd")
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"epochs=1\nclasses=4\nchannels=8\ntrain_path={tmp_path / 'train.sefd'}\n")
    assert main(["ablate", "--config", str(cfg)]) == 2
    assert "test split" in capsys.readouterr().err


def test_ablate_command(trained_files, capsys):
    d, cfg = trained_files
    assert main(["ablate", "--config", str(cfg), "--out", str(d / "a.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines] == [
        "baseline", "grouping_only", "weak_entropy_distill", "weak_entropy_distill_grouping", "full"]
