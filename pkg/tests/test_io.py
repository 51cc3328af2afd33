import struct

import numpy as np
import pytest

from festaseg import io
from festaseg.errors import FormatError


def test_checkpoint_layout_by_hand(tmp_path):
    path = tmp_path / "w.ckpt"
    io.save_checkpoint(path, {"ab": np.array([[1.0, 2.0, 3.0]], dtype=np.float32)})
    expected = (b"FSEGCKPT" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2)
                + struct.pack("<II", 1, 3) + struct.pack("<3f", 1.0, 2.0, 3.0))
    assert path.read_bytes() == expected


def test_checkpoint_roundtrip_preserves_order(tmp_path, rng):
    tensors = {"z": rng.normal(size=(2, 3)).astype(np.float32), "a": np.float32(rng.normal(size=(4,))),
               "scalar": np.array(1.5, dtype=np.float32)}
    path = tmp_path / "w.ckpt"
    io.save_checkpoint(path, tensors)
    back = io.load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:-2],
    lambda b: b + b"\0",
    lambda b: b[:8] + struct.pack("<I", 9) + b[12:],
    lambda b: b[:14],
])
def test_checkpoint_corruption(tmp_path, mutate):
    path = tmp_path / "w.ckpt"
    io.save_checkpoint(path, {"k": np.ones((2, 2), dtype=np.float32)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        io.load_checkpoint(path)


def test_probmap_layout_and_roundtrip(tmp_path, rng):
    p = rng.random((3, 2, 4)).astype(np.float32)
    path = tmp_path / "p.pmap"
    io.save_probmap(path, p)
    raw = path.read_bytes()
    assert raw[:4] == b"PMAP" and struct.unpack_from("<IIII", raw, 4) == (1, 3, 2, 4)
    # class index fastest: second float is pixel (0,0) class 1
    assert struct.unpack_from("<f", raw, 24)[0] == p[0, 0, 1]
    assert io.load_probmap(path).tobytes() == p.tobytes()


def test_probmap_size_mismatch(tmp_path):
    path = tmp_path / "p.pmap"
    io.save_probmap(path, np.ones((2, 2, 2), dtype=np.float32) / 2)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        io.load_probmap(path)


def test_label_png_roundtrip(tmp_path, rng):
    labels = rng.choice([0, 1, 4, 255], size=(7, 9)).astype(np.uint8)
    io.save_labels_png(tmp_path / "l.png", labels)
    np.testing.assert_array_equal(io.load_labels_png(tmp_path / "l.png"), labels)


def test_label_png_rejects_rgb(tmp_path, rng):
    io.save_image_png(tmp_path / "i.png", rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8))
    with pytest.raises(FormatError):
        io.load_labels_png(tmp_path / "i.png")


def test_image_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 6, 3)).astype(np.uint8)
    io.save_image_png(tmp_path / "i.png", img)
    np.testing.assert_array_equal(io.load_image_png(tmp_path / "i.png"), img)


def test_not_a_png(tmp_path):
    (tmp_path / "x.png").write_text("hello")
    with pytest.raises(FormatError):
        io.load_image_png(tmp_path / "x.png")


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(FormatError):
        io.load_json(tmp_path / "c.json")
