import csv

import numpy as np
import pytest

from mcrefine.cli import main
from mcrefine.grid import read_mct1, read_pgm_mask

TINY = """seed = 3
[synth]
patch_size = 16
[data]
train_count = 6
[seg]
steps = 3
batch_size = 2
[rf]
steps = 3
batch_size = 2
[ttgpr]
iterations = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["synth", "--config", str(cfg), "--count", "3", "--out", str(root / "data")]) == 0
    assert main(["train-seg", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "seg.mcw1")]) == 0
    assert main(["--config", str(cfg), "--out", str(root / "rf.mcw1"), "train-rf", "--steps", "2"]) == 0
    return root, cfg


def test_synth_layout(workdir):
    root, _ = workdir
    data = root / "data"
    rows = list(csv.DictReader((data / "manifest.csv").open()))
    assert [r["index"] for r in rows] == ["0", "1", "2"]
    assert all(r["seed"] == "3" and int(r["puncta"]) >= 1 for r in rows)
    for i in range(3):
        x = read_mct1(data / f"xs_{i:06d}.mct1")
        y = read_pgm_mask(data / f"ys_{i:06d}.pgm")
        s = read_pgm_mask(data / f"ss_{i:06d}.pgm")
        assert x.shape == y.shape == s.shape == (16, 16)
        assert np.all(y[s.astype(bool)] == 1) and s.sum() >= 1


def test_synth_seed_flag_changes_output(workdir, tmp_path):
    root, cfg = workdir
    assert main(["synth", "--config", str(cfg), "--count", "1", "--seed", "4", "--out", str(tmp_path)]) == 0
    assert not np.array_equal(read_mct1(tmp_path / "xs_000000.mct1"), read_mct1(root / "data" / "xs_000000.mct1"))


def test_refine_sample_and_eval(workdir):
    root, cfg = workdir
    args = ["refine", "--config", str(cfg), "--seg", str(root / "seg.mcw1"), "--rf", str(root / "rf.mcw1"),
            "--input", str(root / "data" / "xs_000001.mct1"), "--out-prob", str(root / "pred" / "prob_000001.mct1"),
            "--out-mask", str(root / "mask.pgm"), "--trace", str(root / "trace.csv")]
    assert main(args) == 0
    p = read_mct1(root / "pred" / "prob_000001.mct1")
    assert p.shape == (16, 16) and p.min() >= 0 and p.max() <= 1
    assert np.array_equal(read_pgm_mask(root / "mask.pgm"), p >= 0.5)
    trace = list(csv.DictReader((root / "trace.csv").open()))
    assert len(trace) == 2 and float(trace[0]["t"]) == 0.09053149415704413

    assert main(["sample", "--config", str(cfg), "--ckpt", str(root / "rf.mcw1"),
                 "--seed-mask", str(root / "data" / "ss_000000.pgm"), "--out", str(root / "s.mct1")]) == 0
    s = read_mct1(root / "s.mct1")
    assert s.shape == (16, 16) and s.min() >= -1 and s.max() <= 1

    gt = root / "gt"
    gt.mkdir()
    (gt / "ys_000001.pgm").write_bytes((root / "data" / "ys_000001.pgm").read_bytes())
    assert main(["eval", "--pred-dir", str(root / "pred"), "--gt-dir", str(gt), "--out", str(root / "rep.csv")]) == 0
    rows = list(csv.reader((root / "rep.csv").open()))
    assert rows[0][0] == "case" and rows[0][-1] == "degenerate"
    assert [r[0] for r in rows[1:]] == ["ys_000001", "mean", "std"]


def test_exit_codes(workdir, tmp_path, capsys):
    root, _ = workdir
    bad = tmp_path / "bad.cfg"
    bad.write_text("ttgpr.bogus = 1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "ttgpr.bogus" in capsys.readouterr().err
    assert main(["eval", "--pred-dir", str(tmp_path), "--gt-dir", str(tmp_path / "none")]) == 2
    assert main(["refine", "--seg", str(root / "rf.mcw1"), "--rf", str(root / "rf.mcw1"),
                 "--input", str(root / "data" / "xs_000000.mct1"), "--out-prob", str(tmp_path / "p.mct1")]) == 1
    assert main(["synth", "--config", str(tmp_path / "missing.cfg")]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
