import hashlib
import json

import numpy as np
import pytest

from interpgnn.cli import hyper_params, load_config, load_dataset, main, train_config
from interpgnn.evaluation import read_csv
from interpgnn.meshgraph import read_node_field
from interpgnn.model import load_checkpoint
from interpgnn.training import train_baseline

TINY = """
[data]
geometry = {geometry}
resolution = 4
controls = 1.0, 1.5, 2.0, 2.5
n_steps = 5
dt = 0.1

[train]
epochs = 2
nh = 4
levels = 1
rf = 8
lr = 1e-3
lr_min = 1e-6
"""


def run(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for geo in ("step", "cube"):
        (root / f"{geo}.ini").write_text(TINY.format(geometry=geo))
    cfg = root / "step.ini"
    assert run("datagen", "--config", cfg, "--out", root / "data") == 0
    assert run("datagen", "--config", root / "cube.ini", "--out", root / "cube") == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "base") == 0
    assert run("enhance", "--config", cfg, "--data", root / "data", "--checkpoint",
               root / "base/baseline.ckpt", "--lambda", "auto", "--out", root / "auto") == 0
    assert run("enhance", "--config", cfg, "--data", root / "data", "--checkpoint",
               root / "base/baseline.ckpt", "--lambda", "0", "--out", root / "zero") == 0
    return root


def test_datagen_outputs_and_manifest(pipeline):
    info = json.loads((pipeline / "data/dataset.json").read_text())
    assert len(info["files"]["train"]) == 2 and len(info["files"]["test"]) == 2
    man = json.loads((pipeline / "data/manifest.json").read_text())
    assert man["command"] == "datagen" and "dataset.json" in man["outputs"]
    for d in ("base", "auto", "zero"):
        assert (pipeline / d / "manifest.json").exists()


def test_datagen_rerun_is_byte_identical(pipeline, tmp_path):
    assert run("datagen", "--config", pipeline / "step.ini", "--out", tmp_path / "again") == 0
    for f in ("train/traj_000.gsrj", "test/traj_001.gsrj", "dataset.json"):
        assert sha(pipeline / "data" / f) == sha(tmp_path / "again" / f)


def test_missing_geometry_is_config_error(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[data]\nresolution = 4\n")
    assert run("datagen", "--config", tmp_path / "bad.ini", "--out", tmp_path / "o") == 2
    assert "geometry" in capsys.readouterr().err


def test_other_config_and_usage_errors(tmp_path):
    (tmp_path / "unk.ini").write_text("[train]\nlearning_rate = 1\n")
    assert run("train", "--config", tmp_path / "unk.ini", "--data", tmp_path, "--out", tmp_path / "o") == 2
    (tmp_path / "bad.ini").write_text("[train]\nlr = 1e-8\nlr_min = 1e-6\n")
    assert run("train", "--config", tmp_path / "bad.ini", "--data", tmp_path, "--out", tmp_path / "o") == 2
    assert run("train", "--out", tmp_path / "o") == 2                      # --data missing
    assert run("frobnicate", "--out", tmp_path / "o") == 2
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 1


def test_lambda_auto_resolves_to_minus_l_bl(pipeline):
    base = load_checkpoint(pipeline / "base/baseline.ckpt")
    auto = load_checkpoint(pipeline / "auto/enhanced.ckpt")
    assert auto.meta["lambda"] == -base.meta["l_bl"] and auto.meta["l_bl"] == base.meta["l_bl"]


def test_lambda_zero_curve_starts_at_baseline_loss(pipeline):
    base = read_csv(pipeline / "base/loss.csv")
    zero = read_csv(pipeline / "zero/loss.csv")
    assert list(zero[0]) == ["epoch", "train_mse", "val_mse", "budget"]
    assert float(zero[0]["train_mse"]) == float(base[-1]["train_mse"])
    assert float(zero[0]["val_mse"]) == float(base[-1]["val_mse"])


def test_interrupted_training_resumes(pipeline, tmp_path):
    cp = load_config(str(pipeline / "step.ini"))
    cp.set("train", "epochs", "1")
    out = tmp_path / "resumed"
    out.mkdir()
    # a run killed after epoch 1 leaves its resume state behind
    train_baseline(load_dataset(pipeline / "data"), train_config(cp, None), hyper_params(cp),
                   resume_path=out / "resume.npz")
    assert (out / "resume.npz").exists()
    assert run("train", "--config", pipeline / "step.ini", "--data", pipeline / "data", "--out", out) == 0
    assert not (out / "resume.npz").exists()
    a = read_csv(pipeline / "base/loss.csv")
    b = read_csv(out / "loss.csv")
    assert len(a) == len(b) == 3
    for ra, rb in zip(a, b):
        for k in ("train_mse", "val_mse"):
            assert abs(float(ra[k]) - float(rb[k])) <= 1e-12


def test_rollout_of_one_step_equals_single_step_row(pipeline):
    out1, out2 = pipeline / "ev1", pipeline / "ro1"
    for cmd, out in (("evaluate", out1), ("rollout", out2)):
        assert run(cmd, "--config", pipeline / "step.ini", "--data", pipeline / "data",
                   "--checkpoint", pipeline / "auto/enhanced.ckpt", "--steps", 1, "--out", out) == 0
    a = read_csv(out1 / "single_step_000.csv")
    b = read_csv(out2 / "rollout_000.csv")
    assert a[1] == b[1] and a[0]["budget"] == ""
    full = pipeline / "ev"
    assert run("evaluate", "--config", pipeline / "step.ini", "--data", pipeline / "data",
               "--checkpoint", pipeline / "auto/enhanced.ckpt", "--out", full) == 0
    assert read_csv(full / "single_step_000.csv")[1] == a[1]
    rm = read_csv(full / "rmse_single_step.csv")
    assert len(rm) == 4 and {r["feature"] for r in rm} == {"u", "v"}


def test_unseen_geometry_evaluates(pipeline):
    for cmd in ("evaluate", "coherency", "export-mask"):
        out = pipeline / f"cube_{cmd}"
        assert run(cmd, "--config", pipeline / "cube.ini", "--data", pipeline / "cube",
                   "--checkpoint", pipeline / "auto/enhanced.ckpt", "--steps", 2, "--out", out) == 0
    rows = read_csv(pipeline / "cube_coherency/coherency_rollout_000.csv")
    assert [int(r["step"]) for r in rows] == [1, 2]
    _, mask = read_node_field(pipeline / "cube_export-mask/mask_rollout_000_step0002.csv")
    assert mask.sum() == 214 // 8


def test_graph_mismatch_exits_one(pipeline, capsys):
    code = run("enhance", "--config", pipeline / "step.ini", "--data", pipeline / "cube",
               "--checkpoint", pipeline / "base/baseline.ckpt", "--out", pipeline / "mm")
    assert code == 1
    err = capsys.readouterr().err
    assert "|V|=214" in err and "|V|=176" in err


def test_ensemble_single_member_gives_zero_std(pipeline, tmp_path):
    (tmp_path / "ens.ini").write_text(TINY.format(geometry="step") + "\n[ensemble]\nmembers = 1\n")
    out = tmp_path / "ens"
    assert run("ensemble", "--config", tmp_path / "ens.ini", "--data", pipeline / "data",
               "--checkpoint", pipeline / "auto/enhanced.ckpt", "--out", out) == 0
    assert (out / "members/member_000.ckpt").exists()
    for i in range(2):
        _, std = read_node_field(out / f"mask_std_{i:03d}.csv")
        assert np.array_equal(std, np.zeros_like(std))


def test_commands_do_not_mutate_inputs(pipeline):
    before = {p: sha(p) for p in sorted((pipeline / "data").rglob("*.gsrj"))}
    ck = sha(pipeline / "auto/enhanced.ckpt")
    assert run("coherency", "--config", pipeline / "step.ini", "--data", pipeline / "data",
               "--checkpoint", pipeline / "auto/enhanced.ckpt", "--steps", 2, "--out", pipeline / "co") == 0
    assert {p: sha(p) for p in before} == before and sha(pipeline / "auto/enhanced.ckpt") == ck
