import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from poumor import fieldio


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float64, np.complex128, np.uint8, np.int64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip_array(a):
    b = fieldio.loads(fieldio.dumps(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    np.testing.assert_array_equal(b, a)


def test_round_trip_table(tmp_path):
    table = {"u": np.arange(6.0).reshape(2, 3), "mask": np.array([1, 0, 1], np.uint8),
             "step": np.array([7], np.int64), "z": np.array([1 + 2j])}
    fieldio.write(tmp_path / "t.pouf", table)
    back = fieldio.read(tmp_path / "t.pouf")
    assert list(back) == list(table)
    for k in table:
        np.testing.assert_array_equal(back[k], table[k])


def test_header_layout():
    raw = fieldio.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert raw[:4] == b"POUF"
    assert struct.unpack("<HBB", raw[4:8]) == (1, 0, 2)
    assert struct.unpack("<2Q", raw[8:24]) == (1, 3)
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("mutate", [
    lambda r: b"XOUF" + r[4:],
    lambda r: r[:4] + struct.pack("<H", 9) + r[6:],
    lambda r: r[:6] + bytes([7]) + r[7:],
    lambda r: r[:-1],
    lambda r: r + b"\0",
    lambda r: r[:3],
])
def test_reader_rejects_malformed(mutate):
    raw = fieldio.dumps(np.ones((2, 2)))
    with pytest.raises(fieldio.FormatError):
        fieldio.loads(mutate(raw))


def test_checkpoint_round_trip(tmp_path):
    params = {"e0.w": np.ones((2, 2)), "gate.b0": np.zeros(3)}
    opt = {"__t": np.array([3.0]), "m:e0.w": np.full((2, 2), 0.5)}
    cfg = {"model": {"width": 8}, "epoch": 2}
    fieldio.write_checkpoint(tmp_path / "c.pouf", params, cfg, opt, step=11)
    p, c, o, s = fieldio.read_checkpoint(tmp_path / "c.pouf")
    assert c == cfg and s == 11
    assert p.keys() == params.keys() and o.keys() == opt.keys()
    np.testing.assert_array_equal(p["e0.w"], params["e0.w"])
    fieldio.write(tmp_path / "plain.pouf", np.ones(3))
    with pytest.raises(fieldio.FormatError):
        fieldio.read_checkpoint(tmp_path / "plain.pouf")
