import struct

import numpy as np
import pytest

from mebqat.meta import MetricRow
from mebqat.persistence import (
    METRICS_HEADER,
    CheckpointFormatError,
    checkpoint_payload_bytes,
    read_checkpoint,
    write_checkpoint,
    write_metrics,
)

META = {"engine": "mebqat", "model_kind": "conv8-reduced", "epoch": 3}


def _random_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "conv1.weight": rng.normal(size=(4, 1, 3, 3)).astype(np.float32),
        "bn1.scale": rng.normal(size=4).astype(np.float32),
        "head.bias": rng.normal(size=7).astype(np.float32),
    }


def test_roundtrip_is_bit_exact(tmp_path):
    params = _random_params()
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, params, META)
    loaded, meta = read_checkpoint(path)
    assert meta == META
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], params[name])


def test_empty_checkpoint_is_valid(tmp_path):
    path = tmp_path / "empty.ckpt"
    write_checkpoint(path, {}, {"epoch": 0})
    loaded, meta = read_checkpoint(path)
    assert loaded == {}
    assert meta["epoch"] == 0


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        read_checkpoint(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v9.ckpt"
    path.write_bytes(b"MBQT" + struct.pack("<H", 9) + struct.pack("<I", 0))
    with pytest.raises(CheckpointFormatError, match="version"):
        read_checkpoint(path)


def test_truncated_checkpoint(tmp_path):
    full = tmp_path / "full.ckpt"
    write_checkpoint(full, _random_params(), META)
    blob = full.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        read_checkpoint(cut)


def test_trailing_bytes_rejected(tmp_path):
    full = tmp_path / "full.ckpt"
    write_checkpoint(full, _random_params(), META)
    (tmp_path / "padded.ckpt").write_bytes(full.read_bytes() + b"\x00")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        read_checkpoint(tmp_path / "padded.ckpt")


def test_payload_byte_accounting():
    params = _random_params()
    expected = 4 * sum(v.size for v in params.values())
    assert checkpoint_payload_bytes(params) == expected


def test_metrics_golden_bytes(tmp_path):
    rows = [
        MetricRow(epoch=0, branch=0, b_w="FP", b_a="FP", loss=1.25,
                  kd_loss=0.0, accuracy=0.5, backprops=4, wall_ms=0.0),
        MetricRow(epoch=0, branch=1, b_w="2", b_a="4", loss=2.0,
                  kd_loss=0.125, accuracy=0.25, backprops=4, wall_ms=0.0),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics(path, rows)
    expected = (
        METRICS_HEADER + "\n"
        "0,0,FP,FP,1.250000,0.000000,0.500000,4,0.000000\n"
        "0,1,2,4,2.000000,0.125000,0.250000,4,0.000000\n"
    )
    assert path.read_text() == expected


def test_metrics_empty_run_writes_header_only(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics(path, [])
    assert path.read_text() == METRICS_HEADER + "\n"
