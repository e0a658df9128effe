import csv
import json
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pytest
from PIL import Image

from madm.cli import main, parse_overrides, UsageError
from madm.core import Palette
from madm.data import DatasetManifest, load_arrays
from madm.plotting import loss_figure, palette_grid

TINY = ["--iterations", "3", "--ae-steps", "0", "--resolution", "32", "--n-scenes", "8",
        "--batch-size", "2"]


@pytest.fixture(autouse=True)
def runs_dir(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("MADM_RUNS_DIR", str(root))
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "0", "--n-scenes", "6", "--n-val", "4", "--resolution", "32",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(synth_dir), "--out", str(out), *TINY]) == 0
    return out


def test_parse_overrides():
    assert parse_overrides(["--lr", "1e-4", "--use-dplg", "false", "--seed=3"]) == {
        "lr": 1e-4, "use_dplg": False, "seed": 3}
    with pytest.raises(UsageError):
        parse_overrides(["lr"])
    with pytest.raises(UsageError):
        parse_overrides(["--lr"])


def test_unknown_key_fails_without_run_dir(runs_dir, capsys):
    assert main(["train", "--bogus-key", "1", *TINY]) != 0
    assert "bogus_key" in capsys.readouterr().err
    assert not runs_dir.exists() or not any(runs_dir.iterdir())


def test_bad_config_file(tmp_path, runs_dir):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("- not\n- a mapping\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert not runs_dir.exists()


def test_train_writes_run_record(trained):
    for name in ("config.json", "metrics.csv", "model.npz", "eval.json", "confusion.csv",
                 "run.json", "eval_predictions.npy"):
        assert (trained / name).exists(), name
    run = json.loads((trained / "run.json").read_text())
    assert run["config"]["iterations"] == 3 and len(run["code_version"]) == 16
    assert len(_rows(trained / "metrics.csv")) == 3


def test_ablation_flags_zero_out_components(tmp_path, synth_dir):
    out = tmp_path / "abl"
    assert main(["train", "--data", str(synth_dir), "--out", str(out), "--no-dplg", "--no-lplr",
                 *TINY, "--iterations", "4"]) == 0
    rows = _rows(out / "metrics.csv")
    assert all(float(r["L_s_reg"]) == 0.0 and float(r["L_t_reg"]) == 0.0 for r in rows)
    assert all(int(r["k"]) == 0 for r in rows)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["use_lplr"] is False and cfg["lambda_reg"] == 0.0


def test_train_default_run_dir(runs_dir, synth_dir):
    assert main(["train", "--data", str(synth_dir), *TINY]) == 0
    (run,) = runs_dir.iterdir()
    assert run.name.startswith("train-") and (run / "metrics.csv").exists()


def test_synth_twice_is_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "0", "--n-scenes", "4", "--n-val", "2",
                     "--resolution", "32", "--out", str(tmp_path / name)]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert json.loads((tmp_path / "a" / "palette.json").read_text())[0] == [128, 64, 128]


def test_eval_twice_identical(trained, synth_dir, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", str(trained / "model.npz"), "--manifest",
                     str(synth_dir / "target" / "val.json"), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "eval.json").read_text())
    assert outs[0] == outs[1]


def test_eval_ground_truth_feed_scores_one(synth_dir, tmp_path):
    man = DatasetManifest.load(synth_dir / "target" / "val.json")
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    for _, lab in man.pairs:
        (pred_dir / Path(lab).name).write_bytes((Path(man.root) / lab).read_bytes())
    assert main(["eval", "--predictions", str(pred_dir), "--manifest",
                 str(synth_dir / "target" / "val.json"), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "eval.json").read_text())["mean_iou"] == 1.0


def test_eval_matches_independent_confusion(synth_dir, tmp_path):
    man = DatasetManifest.load(synth_dir / "target" / "val.json")
    _, gt = load_arrays(man, for_eval=True)
    g = np.random.default_rng(0)
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    preds = []
    for (_, lab), y in zip(man.pairs, gt):
        p = np.where(g.random(y.shape) < 0.3, g.integers(0, 6, y.shape), y).astype(np.uint8)
        Image.fromarray(p, mode="L").save(pred_dir / Path(lab).name)
        preds.append(p)
    assert main(["eval", "--predictions", str(pred_dir), "--manifest",
                 str(synth_dir / "target" / "val.json"), "--out", str(tmp_path / "e")]) == 0
    oracle = np.zeros((6, 6), dtype=np.int64)
    for p, y in zip(preds, gt):
        for a, b in zip(y.ravel(), p.ravel()):
            if a != 255:
                oracle[a, b] += 1
    got = np.loadtxt(tmp_path / "e" / "confusion.csv", delimiter=",", skiprows=1,
                     dtype=np.int64)[:, 1:]
    assert np.array_equal(got, oracle)


def test_eval_class_mismatch(trained, tmp_path, synth_dir):
    man = DatasetManifest.load(synth_dir / "target" / "val.json")
    man.num_classes = 11
    man.save(tmp_path / "m.json")
    assert main(["eval", "--checkpoint", str(trained / "model.npz"),
                 "--manifest", str(tmp_path / "m.json")]) == 2


def test_distill_requires_teacher(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["distill"])
    assert exc.value.code != 0
    assert main(["distill", "--teacher", "/nonexistent/t.npz"]) == 2


def test_distill_writes_report(trained, synth_dir, tmp_path):
    out = tmp_path / "d"
    assert main(["distill", "--teacher", str(trained / "model.npz"), "--data", str(synth_dir),
                 "--out", str(out), *TINY]) == 0
    report = json.loads((out / "distill_report.json").read_text())
    assert {"teacher", "student", "ratio"} <= set(report)
    assert (out / "student.npz").exists()


def test_plot_single_and_pair(trained, tmp_path, synth_dir):
    other = tmp_path / "other"
    assert main(["train", "--data", str(synth_dir), "--out", str(other), *TINY,
                 "--seed", "1"]) == 0
    assert main(["plot", str(trained), "--out", str(tmp_path / "p1")]) == 0
    assert (tmp_path / "p1" / "loss_curves.png").exists()
    assert main(["plot", str(trained), str(other), "--out", str(tmp_path / "p2")]) == 0
    assert (tmp_path / "p2" / "ablation.png").exists()
    fig = loss_figure([trained, other])
    assert len(fig.axes[0].lines) == 2
    plt.close(fig)
    assert main(["plot", "--out", str(tmp_path / "p3")]) == 2


def test_prediction_grid_colors_in_palette(trained, tmp_path):
    assert main(["plot", str(trained), "--out", str(tmp_path / "p")]) == 0
    (grid_file,) = (tmp_path / "p").glob("predictions_*.png")
    pixels = np.asarray(Image.open(grid_file).convert("RGB")).reshape(-1, 3)
    allowed = {tuple(c) for c in Palette.default(6).table.tolist()}
    assert {tuple(c) for c in np.unique(pixels, axis=0).tolist()} <= allowed


def test_palette_grid_marks_ignore():
    p = Palette.default(6)
    grid = palette_grid(np.array([[[0, 255]]]), p, cols=1, scale=1)
    assert grid[0, 0].tolist() == list(p.colors[0])
    assert grid[0, 1].tolist() == list(p.ignore_color)

