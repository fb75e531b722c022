import json
import subprocess
import sys

import numpy as np
import pytest

from mdsvit import tensor as T
from mdsvit.cli import DEFAULTS, main
from mdsvit.codec import decode_image
from mdsvit.metrics import evaluate

SMALL = ["--set", "model.input_h=32", "--set", "model.input_w=64"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    argv = ["synthesize", "--out", str(root), "--n", "3", "--n-val", "2",
            "--set", "synth.height=32", "--set", "synth.width=64"]
    assert main(argv) == 0
    return root


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--data", str(small_data), "--out", str(out), "--seed", "1",
            "--set", "train.epochs=2", "--set", "train.lr=0.001", "--set", "train.batch_size=3"] + SMALL
    assert main(argv) == 0
    return out


def test_synthesize_layout(small_data):
    for sub, ext in (("images", "ppm"), ("maps", "pgm"), ("fixations", "pgm")):
        assert len(list((small_data / sub / "train").glob(f"*.{ext}"))) == 3
        assert len(list((small_data / sub / "val").glob(f"*.{ext}"))) == 2
    m = decode_image(small_data / "maps" / "train" / "synth_00000.pgm")
    assert m.min() == 0 and m.max() == 1


def test_synthesize_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synthesize", "--out", str(tmp_path / name), "--n", "1", "--n-val", "0", "--seed", "3"]) == 0
    a = (tmp_path / "a" / "images" / "train" / "synth_00000.ppm").read_bytes()
    b = (tmp_path / "b" / "images" / "train" / "synth_00000.ppm").read_bytes()
    assert a == b


def test_unknown_config_key_lists_valid_keys(tmp_path, capsys):
    assert main(["synthesize", "--out", str(tmp_path), "--set", "train.learning_rate=1"]) == 2
    err = capsys.readouterr().err
    assert "train.learning_rate" in err and all(k in err for k in DEFAULTS)


def test_config_file_layering(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth.n": 2, "synth.n_val": 0, "synth.height": 32, "synth.width": 32}))
    assert main(["synthesize", "--config", str(cfg), "--set", "synth.n=1", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "images" / "train").iterdir())) == 1
    cfg.write_text("{nope")
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2


def test_missing_data_root(tmp_path, capsys):
    missing = tmp_path / "absent"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_usage_exit_code():
    assert main(["frobnicate"]) == 2


def test_train_outputs(trained):
    for name in ("best.ckpt", "last.ckpt", "log.csv", "metrics.json"):
        assert (trained / name).exists()
    header = (trained / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,val_loss,val_auc,val_cc,val_sim,val_kl"
    metrics = json.loads((trained / "metrics.json").read_text())
    assert set(metrics["reports"]) == {"map1", "map2"}


def test_train_is_deterministic(small_data, trained, tmp_path):
    argv = ["train", "--data", str(small_data), "--out", str(tmp_path), "--seed", "1",
            "--set", "train.epochs=2", "--set", "train.lr=0.001", "--set", "train.batch_size=3"] + SMALL
    assert main(argv) == 0
    assert (tmp_path / "log.csv").read_bytes() == (trained / "log.csv").read_bytes()
    assert (tmp_path / "best.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()


def test_train_merge_and_predict_merged(small_data, trained, tmp_path):
    merged = tmp_path / "merge"
    argv = ["train-merge", "--data", str(small_data), "--checkpoint", str(trained / "best.ckpt"),
            "--out", str(merged), "--set", "merge.epochs=1", "--set", "merge.batch_size=3"]
    assert main(argv) == 0
    img = small_data / "images" / "val" / "synth_00003.ppm"
    pred = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(merged / "best.ckpt"), "--mode", "merged",
                 "--out", str(pred), str(img)]) == 0
    files = sorted(p.relative_to(pred).as_posix() for p in pred.rglob("*.pgm"))
    assert files == ["map1/synth_00003.pgm", "map2/synth_00003.pgm", "merged/synth_00003.pgm"]


def test_predict_range_size_and_determinism(small_data, trained, tmp_path):
    imgs = sorted(str(p) for p in (small_data / "images" / "train").iterdir())
    for name in ("a", "b"):
        assert main(["predict", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path / name),
                     "--format", "png"] + imgs) == 0
    for p in (tmp_path / "a" / "map1").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "map1" / p.name).read_bytes()
        m = decode_image(p)
        assert m.shape == (1, 32, 64) and 0 <= m.min() and m.max() <= 1


def test_predict_resolution_mismatch(trained, small_data, tmp_path, capsys):
    img = str(next((small_data / "images" / "train").iterdir()))
    argv = ["predict", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path),
            "--set", "model.input_h=64", "--set", "model.input_w=64", img]
    assert main(argv) == 2
    assert "retrain" in capsys.readouterr().err


def test_eval_self_and_schema(small_data, tmp_path):
    maps = small_data / "maps" / "train"
    assert main(["eval", str(maps), str(maps), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {"auc", "kl", "cc", "sim", "n_samples"}
    assert report["cc"] == pytest.approx(1, abs=1e-6) and report["sim"] == pytest.approx(1, abs=1e-9)
    assert report["auc"] == pytest.approx(1, abs=1e-9) and report["kl"] < 1e-9
    assert report["n_samples"] == 3
    assert (tmp_path / "report.txt").read_text().startswith("auc:")


def test_eval_matches_direct_evaluate(small_data, trained, tmp_path):
    imgs = sorted(str(p) for p in (small_data / "images" / "val").iterdir())
    assert main(["predict", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path / "p")] + imgs) == 0
    gt_dir, fix_dir = small_data / "maps" / "val", small_data / "fixations" / "val"
    argv = ["eval", str(tmp_path / "p" / "map1"), str(gt_dir), "--fixations", str(fix_dir), "--out", str(tmp_path / "e")]
    assert main(argv) == 0
    got = json.loads((tmp_path / "e" / "report.json").read_text())
    stems = sorted(p.stem for p in gt_dir.iterdir())
    direct = evaluate(
        [decode_image(tmp_path / "p" / "map1" / f"{s}.pgm")[0] for s in stems],
        [decode_image(gt_dir / f"{s}.pgm")[0] for s in stems],
        [decode_image(fix_dir / f"{s}.pgm")[0] > 0.5 for s in stems],
    )
    for k in ("auc", "kl", "cc", "sim"):
        assert got[k] == pytest.approx(getattr(direct, k), abs=1e-12)


def test_eval_no_overlap(small_data, tmp_path):
    argv = ["eval", str(small_data / "maps" / "train"), str(small_data / "maps" / "val"), "--out", str(tmp_path)]
    assert main(argv) == 2


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--only", "add", "softmax"]) == 0
    assert "2/2 ops passed" in capsys.readouterr().out


def test_grad_check_reports_fault(capsys):
    with T.inject_backward_fault("softmax", 1.05):
        assert main(["grad-check", "--only", "add", "softmax"]) == 1
    assert "failing ops: softmax" in capsys.readouterr().out


def test_grad_check_unknown_name():
    assert main(["grad-check", "--only", "warp_drive"]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mdsvit", "synthesize", "--out", str(tmp_path), "--n", "1", "--n-val", "0",
         "--set", "synth.height=32", "--set", "synth.width=32"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert np.isfinite(decode_image(tmp_path / "images" / "train" / "synth_00000.ppm")).all()
