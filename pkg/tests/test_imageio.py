import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vbrestore import imageio
from vbrestore.errors import DimensionError


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_raw_round_trip_is_lossless(tmp_path_factory, image):
    path = tmp_path_factory.mktemp("raw") / "x.raw"
    imageio.write_raw(path, image)
    back = imageio.read_raw(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, image)


def test_raw_header_layout(tmp_path):
    path = tmp_path / "x.raw"
    imageio.write_raw(path, np.arange(6.0).reshape(2, 3))
    blob = path.read_bytes()
    assert blob[:8] == imageio.RAW_MAGIC
    assert int.from_bytes(blob[8:12], "little") == 2
    assert int.from_bytes(blob[12:16], "little") == 3
    assert len(blob) == 16 + 6 * 8


def test_raw_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "x.raw"
    imageio.write_raw(path, np.ones((3, 3)))
    blob = path.read_bytes()
    (tmp_path / "short.raw").write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="expected 3x3"):
        imageio.read_raw(tmp_path / "short.raw")
    (tmp_path / "head.raw").write_bytes(blob[:10])
    with pytest.raises(ValueError, match="truncated"):
        imageio.read_raw(tmp_path / "head.raw")
    (tmp_path / "magic.raw").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError, match="not a raw"):
        imageio.read_raw(tmp_path / "magic.raw")


def test_raw_rejects_non_2d(tmp_path):
    with pytest.raises(DimensionError):
        imageio.write_raw(tmp_path / "x.raw", np.ones(4))


@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip_integers(tmp_path, rng, bits):
    top = 2**bits - 1
    image = rng.integers(0, top + 1, size=(5, 7)).astype(float)
    path = tmp_path / "x.pgm"
    imageio.write_pgm(path, image, bits=bits)
    np.testing.assert_array_equal(imageio.read_pgm(path), image)
    assert path.read_bytes().startswith(f"P5\n7 5\n{top}\n".encode())


def test_pgm_rounds_and_clips(tmp_path):
    path = tmp_path / "x.pgm"
    imageio.write_pgm(path, np.array([[-3.0, 1.4, 1.6, 300.0]]))
    np.testing.assert_array_equal(imageio.read_pgm(path), [[0, 1, 2, 255]])


def test_pgm_value_range_maps_linearly(tmp_path):
    path = tmp_path / "x.pgm"
    imageio.write_pgm(path, np.array([[-1.0, 0.0, 1.0]]), value_range=(-1.0, 1.0))
    np.testing.assert_array_equal(imageio.read_pgm(path), [[0, 128, 255]])


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n\x07\x09")
    np.testing.assert_array_equal(imageio.read_pgm(path), [[7, 9]])


def test_pgm_errors(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P2\n2 1\n255\n1 2\n")
    with pytest.raises(ValueError, match="P5"):
        imageio.read_pgm(path)
    path.write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError, match="truncated"):
        imageio.read_pgm(path)
    path.write_bytes(b"P5\n2 2\n70000\n")
    with pytest.raises(ValueError, match="invalid"):
        imageio.read_pgm(path)
    with pytest.raises(ValueError, match="8 or 16"):
        imageio.write_pgm(path, np.ones((2, 2)), bits=12)


def test_labels_pgm_spreads_gray_levels(tmp_path):
    path = tmp_path / "l.pgm"
    imageio.write_labels_pgm(path, np.array([[0, 1, 2]]), 3)
    np.testing.assert_array_equal(imageio.read_pgm(path), [[0, 128, 255]])


def test_read_image_dispatches_on_magic(tmp_path):
    image = np.array([[1.25, 2.0]])
    imageio.write_raw(tmp_path / "a.bin", image)
    imageio.write_pgm(tmp_path / "b.bin", image)
    np.testing.assert_array_equal(imageio.read_image(tmp_path / "a.bin"), image)
    np.testing.assert_array_equal(imageio.read_image(tmp_path / "b.bin"), [[1, 2]])
    (tmp_path / "c.bin").write_bytes(b"GIF89a..")
    with pytest.raises(ValueError, match="unrecognised"):
        imageio.read_image(tmp_path / "c.bin")
