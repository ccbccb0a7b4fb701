import numpy as np
import pytest

from prostapipe.imgio import read_gray, read_pgm, write_gray, write_pgm


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(11, 7), dtype=np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)


def test_pgm_bytes_are_canonical(tmp_path):
    img = np.array([[0, 128], [255, 7]], dtype=np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 7])


def test_pgm_reader_accepts_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
    assert np.array_equal(read_pgm(path), np.array([[1, 2]], dtype=np.uint8))


def test_pgm_truncated_rejected(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5\n4 4\n255\nabc")
    with pytest.raises(ValueError, match="pixel bytes"):
        read_pgm(path)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(9, 13), dtype=np.uint8)
    path = tmp_path / "x.png"
    write_gray(path, img)
    assert np.array_equal(read_gray(path), img)


def test_unknown_extension_rejected(tmp_path):
    with pytest.raises(ValueError, match="unsupported"):
        write_gray(tmp_path / "x.bmp", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError, match="unsupported"):
        read_gray(tmp_path / "x.tif")
