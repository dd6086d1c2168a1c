import json

import numpy as np
import pytest

from rankexperts import checkpoint


def test_round_trip_and_bytes(tmp_path, lm):
    a = checkpoint.save_dense(lm, tmp_path / "a")
    b = checkpoint.save_dense(lm, tmp_path / "b")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()
    back = checkpoint.load_dense(a)
    assert back.cfg == lm.cfg
    for k, v in lm.weights.items():
        np.testing.assert_array_equal(back.weights[k], v.astype(np.float32))


def test_manifest_guards(tmp_path, lm):
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path)
    d = checkpoint.save(tmp_path / "x", {"t": np.ones(3)}, "f64", {"kind": "other"})
    with pytest.raises(ValueError, match="not a dense"):
        checkpoint.load_dense(d)
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError, match="unsupported"):
        checkpoint.load(d)


def test_blob_layout_is_little_endian_row_major(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    e = checkpoint.write_blob(tmp_path / "t.f64", arr, "f64")
    assert e == {"file": "t.f64", "dtype": "f64", "shape": [2, 3]}
    assert (tmp_path / "t.f64").read_bytes() == arr.astype("<f8").tobytes()
    np.testing.assert_array_equal(checkpoint.read_blob(tmp_path, e), arr)
