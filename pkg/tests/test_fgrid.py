"""FGRID container: byte layout, round trips, error taxonomy, exports."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resmap.fgrid import (
    FORMAT_VERSION,
    LEVEL_COLORS,
    MAGIC,
    FgridError,
    Raster,
    read_fgrid,
    write_fgrid,
    write_gray_pgm,
    write_level_ppm,
)


def test_header_matches_hand_assembled_layout(tmp_path):
    """The written header must equal bytes built from the format doc alone."""
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "t.fgrid"
    write_fgrid(path, Raster(data, resolution=0.5))
    blob = path.read_bytes()

    want_header = b"FGRD"
    want_header += struct.pack("<I", 1)      # version
    want_header += struct.pack("<I", 4)      # width
    want_header += struct.pack("<I", 3)      # height
    want_header += struct.pack("<I", 2)      # channels
    want_header += struct.pack("<B", 0)      # dtype code f32
    want_header += struct.pack("<d", 0.5)    # resolution
    assert blob[:29] == want_header

    # payload is row-major channel-last
    want_payload = data.transpose(1, 2, 0).astype("<f4").tobytes()
    assert blob[29:] == want_payload


def test_round_trip_f32(tmp_path):
    g = np.random.default_rng(0)
    data = g.standard_normal((5, 16, 16)).astype(np.float32)
    path = tmp_path / "r.fgrid"
    write_fgrid(path, Raster(data, resolution=0.25))
    back = read_fgrid(path)
    np.testing.assert_array_equal(back.data, data)
    assert back.data.dtype == np.float32
    assert back.resolution == 0.25


def test_round_trip_u8(tmp_path):
    g = np.random.default_rng(1)
    data = g.integers(0, 256, size=(1, 7, 9), dtype=np.uint8)
    path = tmp_path / "u.fgrid"
    write_fgrid(path, Raster(data, resolution=2.0))
    back = read_fgrid(path)
    np.testing.assert_array_equal(back.data, data)
    assert back.data.dtype == np.uint8


def test_round_trip_preserves_nan_and_inf_bits(tmp_path):
    data = np.array([[[np.nan, np.inf], [-np.inf, -0.0]]], dtype=np.float32)
    path = tmp_path / "n.fgrid"
    write_fgrid(path, Raster(data))
    back = read_fgrid(path)
    assert back.data.tobytes() == data.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 6),
    h=st.integers(1, 12),
    w=st.integers(1, 12),
    code=st.sampled_from([0, 1]),
    res=st.floats(0.01, 100.0, allow_nan=False),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(tmp_path_factory, c, h, w, code, res, seed):
    g = np.random.default_rng(seed)
    if code == 0:
        data = g.standard_normal((c, h, w)).astype(np.float32)
    else:
        data = g.integers(0, 256, size=(c, h, w), dtype=np.uint8)
    path = tmp_path_factory.mktemp("fg") / "p.fgrid"
    write_fgrid(path, Raster(data, resolution=res))
    back = read_fgrid(path)
    assert back.data.tobytes() == data.tobytes()
    assert back.data.shape == (c, h, w)
    assert back.resolution == res


def _valid_blob():
    data = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    import io
    import tempfile
    import os
    fd, path = tempfile.mkstemp()
    os.close(fd)
    write_fgrid(path, Raster(data))
    blob = open(path, "rb").read()
    os.unlink(path)
    return blob


def _read_bytes(tmp_path, blob):
    path = tmp_path / "x.fgrid"
    path.write_bytes(blob)
    return read_fgrid(path)


def test_error_truncated_header(tmp_path):
    with pytest.raises(FgridError, match="header"):
        _read_bytes(tmp_path, b"FGRD\x01")


def test_error_bad_magic(tmp_path):
    blob = _valid_blob()
    with pytest.raises(FgridError, match="magic"):
        _read_bytes(tmp_path, b"XXXX" + blob[4:])


def test_error_unsupported_version(tmp_path):
    blob = _valid_blob()
    bad = blob[:4] + struct.pack("<I", 99) + blob[8:]
    with pytest.raises(FgridError, match="version"):
        _read_bytes(tmp_path, bad)


def test_error_unknown_dtype_code(tmp_path):
    blob = _valid_blob()
    bad = blob[:20] + struct.pack("<B", 7) + blob[21:]
    with pytest.raises(FgridError, match="dtype"):
        _read_bytes(tmp_path, bad)


def test_error_zero_extent(tmp_path):
    blob = _valid_blob()
    bad = blob[:8] + struct.pack("<I", 0) + blob[12:]
    with pytest.raises(FgridError, match="extent"):
        _read_bytes(tmp_path, bad)


def test_error_truncated_payload(tmp_path):
    blob = _valid_blob()
    with pytest.raises(FgridError, match="truncated payload"):
        _read_bytes(tmp_path, blob[:-4])


def test_error_oversized_payload(tmp_path):
    blob = _valid_blob()
    with pytest.raises(FgridError, match="payload"):
        _read_bytes(tmp_path, blob + b"\x00\x00")


def test_raster_validation():
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 2), dtype=np.float32), resolution=0.0)
    with pytest.raises(ValueError):
        Raster(np.zeros((0, 2, 2), dtype=np.float32))
    r = Raster(np.zeros((4, 5), dtype=np.float32))
    assert r.data.shape == (1, 4, 5)
    assert (r.channels, r.height, r.width) == (1, 4, 5)


def test_level_ppm_golden(tmp_path):
    levels = np.array([[0, 1], [3, 4]], dtype=np.uint8)
    path = tmp_path / "l.ppm"
    write_level_ppm(path, levels)
    blob = path.read_bytes()
    want = b"P6\n2 2\n255\n"
    want += bytes(LEVEL_COLORS[0]) + bytes(LEVEL_COLORS[1])
    want += bytes(LEVEL_COLORS[3]) + bytes(LEVEL_COLORS[4])
    assert blob == want


def test_level_ppm_palette_distinct():
    assert len(set(LEVEL_COLORS)) == 5


def test_level_ppm_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        write_level_ppm(tmp_path / "b.ppm", np.array([[5]], dtype=np.uint8))
    with pytest.raises(ValueError):
        write_level_ppm(tmp_path / "b.ppm", np.array([[0.5]]))


def test_gray_pgm_golden(tmp_path):
    vals = np.array([[0.0, 0.5], [1.0, 2.0]])  # 2.0 clips to 1
    path = tmp_path / "g.pgm"
    write_gray_pgm(path, vals)
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 255])


def test_gray_pgm_bool_mask(tmp_path):
    mask = np.array([[True, False]])
    path = tmp_path / "m.pgm"
    write_gray_pgm(path, mask)
    assert path.read_bytes() == b"P5\n2 1\n255\n" + bytes([255, 0])
