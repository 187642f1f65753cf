"""Tensor file format round trips and corruption handling."""

import numpy as np
import pytest

from gcascade import gten


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (5,), (2, 3), (2, 3, 4, 5)])
def test_round_trip(tmp_path, dtype, shape):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal(shape).astype(dtype)
    p = tmp_path / "a.gten"
    gten.write_gten(p, arr)
    back = gten.read_gten(p)
    assert back.dtype == dtype
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_header_bytes(tmp_path):
    p = tmp_path / "h.gten"
    gten.write_gten(p, np.zeros((2, 3), dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"GTEN"
    assert raw[4] == 1 and raw[5] == 0 and raw[6] == 2
    assert int.from_bytes(raw[7:15], "little") == 2
    assert int.from_bytes(raw[15:23], "little") == 3
    assert len(raw) == 23 + 2 * 3 * 4


def test_write_rejects_non_float(tmp_path):
    with pytest.raises(ValueError):
        gten.write_gten(tmp_path / "x.gten", np.zeros(3, dtype=np.int32))


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOPE" + b[4:],
    lambda b: b[:4] + bytes([9]) + b[5:],   # bad version
    lambda b: b[:5] + bytes([7]) + b[6:],   # bad dtype code
    lambda b: b[:-3],                        # truncated payload
    lambda b: b + b"\x00",                   # trailing bytes
])
def test_corrupt_files_rejected(tmp_path, mutate):
    p = tmp_path / "c.gten"
    gten.write_gten(p, np.ones((2, 2), dtype=np.float32))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(ValueError):
        gten.read_gten(p)


def test_manifest_round_trip(tmp_path):
    p = tmp_path / "manifest.txt"
    entries = {"seed": "3", "epochs": "10", "variant": "mr"}
    gten.write_manifest(p, entries)
    assert gten.read_manifest(p) == entries
    # byte-stable: keys come out sorted
    assert p.read_text().splitlines() == ["epochs = 10", "seed = 3", "variant = mr"]
