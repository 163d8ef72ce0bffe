import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynct.geometry import ScanProtocol
from dynct.grid import FlowField, ImageGrid
from dynct.projector import Sinogram
from dynct.rasterio import (
    RasterFormatError,
    decode_gr64,
    encode_gr64,
    load_flow,
    load_gr64,
    load_sinogram,
    parse_keyvalue,
    read_pgm,
    save_flow,
    save_gr64,
    save_pgm,
    save_sinogram,
    to_pgm,
)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7))))
def test_gr64_round_trip_bit_exact(a):
    back = decode_gr64(encode_gr64(a))
    assert back.shape == a.shape
    assert back.tobytes() == a.astype("<f8").tobytes()


def test_gr64_header_layout():
    data = encode_gr64(np.zeros((2, 3)))
    assert data[:4] == b"GR64"
    assert int.from_bytes(data[4:8], "little") == 2
    assert int.from_bytes(data[8:12], "little") == 3
    assert data[12:16] == b"\0\0\0\0"
    assert len(data) == 16 + 48


def test_gr64_errors_carry_offsets():
    good = encode_gr64(np.ones((2, 2)))
    with pytest.raises(RasterFormatError) as e:
        decode_gr64(good[:10])
    assert e.value.offset == 10
    with pytest.raises(RasterFormatError) as e:
        decode_gr64(b"GR32" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(RasterFormatError):
        decode_gr64(good[:-1])
    with pytest.raises(RasterFormatError) as e:
        decode_gr64(good[:12] + b"\1\0\0\0" + good[16:])
    assert e.value.offset == 12


def test_gr64_rejects_non_2d():
    with pytest.raises(ValueError):
        encode_gr64(np.zeros(4))


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = ImageGrid(rng.standard_normal((8, 8)))
    save_gr64(tmp_path / "a.gr64", img)
    assert load_gr64(tmp_path / "a.gr64").tobytes() == img.values.tobytes()
    flow = FlowField(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
    px, py = save_flow(tmp_path / "v", flow)
    assert px.name == "v.vx.gr64" and py.name == "v.vy.gr64"
    back = load_flow(tmp_path / "v.vx.gr64")
    assert back.vx.tobytes() == flow.vx.tobytes() and back.vy.tobytes() == flow.vy.tobytes()


def test_sinogram_round_trip(tmp_path):
    p = ScanProtocol(m=4, angles_per_scan=6, n_det=9, det_spacing=0.5, border=3)
    s = Sinogram(p, 3, np.random.default_rng(1).standard_normal((6, 9)))
    save_sinogram(tmp_path / "s.gr64", s)
    assert (tmp_path / "s.meta").exists()
    back = load_sinogram(tmp_path / "s.gr64")
    assert back.protocol == p and back.scan_index == 3
    assert back.values.tobytes() == s.values.tobytes()


def test_pgm_mapping():
    data = to_pgm(np.array([[0.0, 1.0], [0.5, 2.0]]))
    assert data.startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(data), [[0, 128], [64, 255]])
    np.testing.assert_array_equal(read_pgm(to_pgm(np.full((3, 3), 7.0))), 0)


def test_pgm_file_is_upright(tmp_path):
    v = np.zeros((4, 4))
    v[0, 0] = 1.0  # row 0 is the bottom of the picture
    save_pgm(tmp_path / "a.pgm", v)
    q = read_pgm((tmp_path / "a.pgm").read_bytes())
    assert q[3, 0] == 255 and q.sum() == 255


def test_keyvalue_parsing():
    d = parse_keyvalue("# comment\n a = 1 \n\nb=x=y\n")
    assert d == {"a": "1", "b": "x=y"}
    with pytest.raises(ValueError, match="line 2"):
        parse_keyvalue("a=1\nbroken\n")
