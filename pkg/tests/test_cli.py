from pathlib import Path

import numpy as np
import pytest

from mebqat.cli import main
from mebqat.data import load_idx

TINY_MEBQAT = """
[run]
engine = mebqat
seed = 5

[data]
classes = 4
samples_per_class = 24
test_samples_per_class = 8
image_size = 16

[tasks]
weight_bits = [2, 8, FP]
minor_weight_bits = []

[train]
epochs = 2
branches = 2
batch_size = 12

[eval]
tasks = ["2,2", "FP,FP"]
"""

TINY_PN = """
[run]
engine = mebqat-pn

[data]
classes = 10
samples_per_class = 6
image_size = 16
holdout_classes = 4

[tasks]
weight_bits = [4, FP]

[train]
epochs = 6
branches = 2

[episode]
ways = 3
shots = 1
query_shots = 2
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_train_writes_outputs_and_is_deterministic(tmp_path, capsys):
    config = _write(tmp_path, TINY_MEBQAT)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", config, "--out", str(out_a)]) == 0
    assert main(["train", "--config", config, "--out", str(out_b)]) == 0
    for name in ("metrics.csv", "model.ckpt"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    # resolved configs agree except for the differing output directory itself
    strip = lambda p: [
        line for line in (p / "config.resolved.ini").read_text().splitlines()
        if not line.startswith("out_dir")
    ]
    assert strip(out_a) == strip(out_b)


def test_changing_seed_changes_outputs(tmp_path):
    config = _write(tmp_path, TINY_MEBQAT)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", config, "--out", str(out_a)]) == 0
    assert main(["train", "--config", config, "--out", str(out_b), "--seed", "6"]) == 0
    assert (out_a / "model.ckpt").read_bytes() != (out_b / "model.ckpt").read_bytes()


def test_eval_prints_one_row_per_task(tmp_path, capsys):
    config = _write(tmp_path, TINY_MEBQAT)
    out = tmp_path / "run"
    main(["train", "--config", config, "--out", str(out)])
    capsys.readouterr()
    assert main(["eval", "--config", config, "--out", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "b_w,b_a,accuracy"
    assert lines[1].startswith("2,2,")
    assert lines[2].startswith("FP,FP,")


def test_meta_eval_runs_episodes(tmp_path, capsys):
    config = _write(tmp_path, TINY_PN)
    out = tmp_path / "run"
    main(["train", "--config", config, "--out", str(out)])
    capsys.readouterr()
    code = main([
        "meta-eval", "--config", config, "--out", str(out),
        "--episodes", "5", "--tasks", "4,4", "FP,FP",
    ])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    for line in lines[1:]:
        acc = float(line.rsplit(",", 1)[1])
        assert 0.0 <= acc <= 1.0


def test_report_cost_measures_branches(tmp_path, capsys):
    config = _write(tmp_path, TINY_MEBQAT)
    out = tmp_path / "run"
    main(["train", "--config", config, "--out", str(out)])
    capsys.readouterr()
    assert main(["report-cost", "--config", config, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "backprops per update:     2" in text
    assert "evaluated bitwidth pairs: 2" in text


def test_make_synthetic_then_train_from_idx(tmp_path, capsys):
    assert main([
        "make-synthetic", "--out", str(tmp_path / "glyphs"),
        "--classes", "4", "--per-class", "12", "--image-size", "16", "--seed", "2",
    ]) == 0
    ds = load_idx(tmp_path / "glyphs-images.idx", tmp_path / "glyphs-labels.idx")
    assert len(ds) == 48

    config = _write(
        tmp_path,
        f"""
[run]
engine = qat

[data]
source = idx
train_images = {tmp_path/'glyphs-images.idx'}
train_labels = {tmp_path/'glyphs-labels.idx'}
test_images = {tmp_path/'glyphs-images.idx'}
test_labels = {tmp_path/'glyphs-labels.idx'}

[train]
epochs = 1
batch_size = 16
task = "8,8"
""",
        name="idx.ini",
    )
    assert main(["train", "--config", config, "--out", str(tmp_path / "qat")]) == 0


def test_invalid_config_returns_nonzero_with_field(tmp_path, capsys):
    config = _write(tmp_path, "[run]\nengine = warp\n", name="bad.ini")
    assert main(["train", "--config", config]) == 2
    assert "run.engine" in capsys.readouterr().err


def test_set_overrides_apply(tmp_path, capsys):
    config = _write(tmp_path, TINY_MEBQAT)
    out = tmp_path / "run"
    assert main([
        "train", "--config", config, "--out", str(out),
        "--set", "train.epochs=1", "--set", "train.branches=3",
    ]) == 0
    resolved = (out / "config.resolved.ini").read_text()
    assert "epochs = 1" in resolved
    assert "branches = 3" in resolved


def test_gradcheck_smoke(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    text = capsys.readouterr().out
    assert "excluded from numeric check" in text
    assert "conv5-maml model" in text


def test_corrupt_checkpoint_fails_eval(tmp_path, capsys):
    config = _write(tmp_path, TINY_MEBQAT)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(Exception, match="magic"):
        main(["eval", "--config", config, "--checkpoint", str(bad)])
