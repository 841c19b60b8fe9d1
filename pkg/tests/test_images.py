import numpy as np
import pytest

from semhum import images as im
from semhum.errors import ValidationError


def test_ppm_roundtrip_and_quantization(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.uniform(-0.1, 1.1, size=(9, 13, 3))
    path = tmp_path / "x.ppm"
    im.write_ppm(path, rgb)
    back, maxval = im.read_ppm(path)
    assert maxval == 255
    expect = np.rint(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    assert np.array_equal(back, expect)


def test_pgm_roundtrip_and_maxval(tmp_path):
    labels = np.array([[0, 1, 2], [4, 3, 0]])
    path = tmp_path / "l.pgm"
    im.write_pgm(path, labels, maxval=4)
    back, maxval = im.read_pgm(path)
    assert maxval == 4
    assert np.array_equal(back, labels)
    with pytest.raises(ValidationError, match="exceed maxval"):
        im.write_pgm(path, labels, maxval=3)


def test_header_comments_and_whitespace(tmp_path):
    payload = bytes(range(6))
    raw = b"P5\n# a comment\n 3\t2 \n# another\n255\n" + payload
    path = tmp_path / "c.pgm"
    path.write_bytes(raw)
    img, maxval = im.read_pgm(path)
    assert img.shape == (2, 3) and maxval == 255
    assert np.array_equal(img.ravel(), np.frombuffer(payload, dtype=np.uint8))


def test_truncation_reports_byte_offset(tmp_path):
    rgb = np.zeros((4, 4, 3))
    path = tmp_path / "t.ppm"
    im.write_ppm(path, rgb)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ValidationError, match="offset"):
        im.read_ppm(path)


def test_magic_and_maxval_validation(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"Q5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValidationError, match="magic"):
        im.read_pgm(path)
    path.write_bytes(b"P5\n2 2\n70000\n" + bytes(8))
    with pytest.raises(ValidationError, match="maxval"):
        im.read_pgm(path)
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValidationError, match="P5"):
        im.read_pgm(path)


def test_header_ended_early(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n3")
    with pytest.raises(ValidationError, match="header"):
        im.read_pgm(path)


def test_to_float():
    u8 = np.array([[0, 128, 255]], dtype=np.uint8)
    f = im.to_float(u8)
    assert f[0, 0] == 0.0 and f[0, 2] == 1.0
    assert abs(f[0, 1] - 128 / 255) < 1e-15
