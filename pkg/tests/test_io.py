import json

import numpy as np
import pytest

from crossmas.errors import HeaderError
from crossmas.io import DataLengthError, read_volume, write_volume
from crossmas.volume import LabelMap, Volume


def test_volume_roundtrip_f32(tmp_path, rng):
    vol = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), spacing=(0.5, 1, 2), origin=(1, 2, 3))
    write_volume(tmp_path / "v.mvol", vol)
    back = read_volume(tmp_path / "v.mvol")
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing and back.origin == vol.origin


def test_label_roundtrip_keeps_label_set(tmp_path):
    lab = LabelMap(np.arange(24).reshape(2, 3, 4) % 3, label_set=(0, 1, 2, 9))
    write_volume(tmp_path / "l.mvol", lab)
    back = read_volume(tmp_path / "l.mvol")
    assert isinstance(back, LabelMap)
    np.testing.assert_array_equal(back.data, lab.data)
    assert back.label_set == (0, 1, 2, 9)


def test_raw_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(tmp_path / "v.mvol", Volume(data))
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    assert raw[1] == data[1, 0, 0] and raw[2] == data[0, 1, 0]


def test_truncated_payload_is_rejected(tmp_path):
    write_volume(tmp_path / "v.mvol", Volume(np.zeros((2, 2, 2))))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(DataLengthError):
        read_volume(tmp_path / "v.mvol")


@pytest.mark.parametrize("patch", [{"dims": [2, 2]}, {"spacing": [1, -1, 1]}, {"dtype": "f64"},
                                   {"dims": "x"}])
def test_bad_headers(tmp_path, patch):
    write_volume(tmp_path / "v.mvol", Volume(np.zeros((2, 2, 2))))
    header = json.loads((tmp_path / "v.mvol").read_text())
    header.update(patch)
    (tmp_path / "v.mvol").write_text(json.dumps(header))
    with pytest.raises(HeaderError):
        read_volume(tmp_path / "v.mvol")


def test_label_out_of_int16_range(tmp_path):
    with pytest.raises(ValueError):
        write_volume(tmp_path / "l.mvol", LabelMap(np.full((1, 1, 1), 70000)))


def test_write_is_deterministic(tmp_path, rng):
    vol = Volume(rng.normal(size=(3, 3, 3)))
    write_volume(tmp_path / "a.mvol", vol)
    write_volume(tmp_path / "b.mvol", vol)
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    a = json.loads((tmp_path / "a.mvol").read_text())
    b = json.loads((tmp_path / "b.mvol").read_text())
    assert a.pop("data") == "a.raw" and b.pop("data") == "b.raw" and a == b
    assert not list(tmp_path.glob("*.tmp*"))
