import csv
import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from stdnet.cli import main
from stdnet.data_io import load_density

ERROR_LINE = re.compile(r"^error: \w+: .+$")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.json").write_text(json.dumps({"image_size": [16, 16], "frames_per_sequence": 3, "T": 3,
                                              "stride": 3, "n_sequences": 5}))
    (d / "cfg.json").write_text(json.dumps({"preset": "tiny", "T": 3, "train": {"base_lr": 1e-3}}))
    assert main(["gen-synth", "--spec", str(d / "synth.json"), "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "cfg.json"), "--epochs", "1",
                 "--log", str(d / "log.csv"), "--out", str(d / "m.stdn")]) == 0
    return d


def test_train_outputs(workspace):
    with open(workspace / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["step"] == "" and float(rows[-1]["val_mae"]) >= 0
    assert (workspace / "m.stdn").read_bytes()[:4] == b"STDN"


def test_eval_and_predict(workspace, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "m.stdn"), "--data", str(workspace / "data")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["clips"] == 5 and out["mae"] <= out["mse"]
    assert main(["predict", "--checkpoint", str(workspace / "m.stdn"), "--clip", str(workspace / "data"),
                 "--index", "2", "--out", str(workspace / "p.dmap")]) == 0
    pred = json.loads(capsys.readouterr().out)
    d = load_density(workspace / "p.dmap")
    assert d.shape == (16, 16)
    assert d.count == pytest.approx(pred["count"], rel=1e-5)


def test_densitymap(tmp_path, capsys):
    (tmp_path / "a.json").write_text(json.dumps({"size": [20, 20], "frames": [{"id": 3, "points": [[4, 5], [10, 10]]}]}))
    assert main(["densitymap", "--ann", str(tmp_path / "a.json"), "--frame", "3", "--sigma", "adaptive:0.3,3",
                 "--out", str(tmp_path / "d.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["points"] == 2
    assert abs(load_density(tmp_path / "d.csv").count - 2) < 1e-5


def test_attn_dump(workspace):
    out = workspace / "attn.csv"
    assert main(["attn-dump", "--checkpoint", str(workspace / "m.stdn"), "--clip", str(workspace / "data"),
                 "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"block_id", "channel", "weight"}
    w = np.array([float(r["weight"]) for r in rows])
    assert np.all((w > 0) & (w < 1))
    assert {r["block_id"] for r in rows} >= {"dstb0.dtb", "dstb3.dtb", "dstb0.dsb/t0"}


def test_count_params_and_gradcheck(capsys):
    assert main(["count-params"]) == 0
    assert "18,166,081" in capsys.readouterr().out
    assert main(["gradcheck", "--op", "conv1d", "--op", "attention"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all("PASS" in ln for ln in lines)


def test_study_decomp(tmp_path, capsys):
    assert main(["study", "decomp", "--out", str(tmp_path)]) == 0
    assert "+26,081" in capsys.readouterr().out


def test_errors_are_single_line(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"size": [64, 64], "frames": [{"id": 0, "points": [[70, 3]]}]}))
    assert main(["densitymap", "--ann", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x.dmap")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0]) and "frame 0" in err[0]
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.stdn"), "--data", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0])


def test_module_entry_point_subprocess(tmp_path):
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "stdnet.cli", "count-params", "--config", str(tmp_path / "nope.json")],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 1
    assert ERROR_LINE.match(r.stderr.strip())
