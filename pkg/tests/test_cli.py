import csv
import json
import shutil

import numpy as np
import pytest

from avlse import ntf
from avlse.cli import main
from avlse.signal import read_wav

CONFIG = {"variant": "A+V", "max_steps": 2, "seed": 0, "crop_frames": 8, "dtype": "float32",
          "network": {"base_width": 4, "depth": 2, "heads": 2, "visual_dim": 64, "time_dim": 8}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "10", "--snr-list", "0,5", "--seed", "2", "--out", str(d / "data"), "--max-duration", "1.2"]) == 0
    (d / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data"), "--out", str(d / "run")]) == 0
    return d


def test_train_outputs(workdir):
    assert (workdir / "run" / "final.ckpt").exists()
    assert (workdir / "run" / "train_log.png").exists()


def test_resume_continues(workdir, tmp_path):
    cfg = dict(CONFIG, max_steps=3)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    rc = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(workdir / "data"), "--out", str(tmp_path / "r"),
               "--resume", str(workdir / "run" / "final.ckpt")])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "r" / "train_log.csv")))
    assert len(rows) == 2


def test_enhance_round_trip(workdir, tmp_path):
    rec = workdir / "data" / "rec_0000"
    args = ["enhance", "--ckpt", str(workdir / "run" / "final.ckpt"), "--in", str(rec / "noisy.wav"),
            "--visual", str(rec / "embeddings.ntf"), "--out", str(tmp_path / "e.wav"), "--seed", "4", "--steps", "2"]
    assert main(args) == 0
    out, sr = read_wav(tmp_path / "e.wav")
    noisy, _ = read_wav(rec / "noisy.wav")
    assert sr == 16000 and len(out) == len(noisy)
    args[-5] = str(tmp_path / "f.wav")
    assert main(args) == 0
    assert np.array_equal(read_wav(tmp_path / "f.wav")[0], out)


def test_enhance_needs_visual(workdir, tmp_path):
    rec = workdir / "data" / "rec_0000"
    rc = main(["enhance", "--ckpt", str(workdir / "run" / "final.ckpt"), "--in", str(rec / "noisy.wav"), "--out", str(tmp_path / "e.wav")])
    assert rc == 1


def test_evaluate_report(workdir, tmp_path):
    rc = main(["evaluate", "--ckpt", str(workdir / "run" / "final.ckpt"), "--data", str(workdir / "data"), "--split", "test",
               "--report", str(tmp_path / "r.csv"), "--steps", "2"])
    assert rc == 0
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[-2][0] == "mean" and rows[-1][0] == "std"
    assert (tmp_path / "r.png").exists()


def test_evaluate_partial_failure(workdir, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(workdir / "data", data)
    man = json.loads((data / "manifest.json").read_text())
    victim = next(r for r in man["records"] if r["split"] == "test")
    (data / victim["noisy"]).unlink()
    rc = main(["evaluate", "--ckpt", str(workdir / "run" / "final.ckpt"), "--data", str(data), "--split", "test",
               "--report", str(tmp_path / "r.csv"), "--steps", "1"])
    assert rc == 2


def test_inspect_sde(tmp_path):
    assert main(["inspect-sde", "--grid", "11", "--out", str(tmp_path / "s.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["t", "g", "exp_neg_eta_t", "sigma"]
    assert len(rows) == 12
    assert float(rows[-1][3]) == pytest.approx(0.3889826582066752, rel=1e-15)
    assert (tmp_path / "s.png").exists()


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "score_network" in out and "FAIL" not in out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["gen-data", "--n", "x", "--out", "o"]])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_missing_config_is_usage_error(tmp_path):
    assert main(["inspect-sde", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "s.csv")]) == 1
