import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from krillboard import rle


def test_round_trip_simple():
    mask = np.zeros((4, 5), dtype=bool)
    mask[1:3, 2:4] = True
    enc = rle.encode(mask)
    assert enc["size"] == [4, 5]
    assert sum(enc["counts"]) == 20
    assert (rle.decode(enc) == mask).all()


def test_counts_start_with_background():
    mask = np.ones((2, 2), dtype=bool)
    enc = rle.encode(mask)
    assert enc["counts"] == [0, 4]


def test_all_background():
    mask = np.zeros((3, 3), dtype=bool)
    enc = rle.encode(mask)
    assert enc["counts"] == [9]
    assert not rle.decode(enc).any()


def test_bad_counts_rejected():
    with pytest.raises(ValueError):
        rle.decode({"size": [2, 2], "counts": [3]})


def test_non_2d_rejected():
    with pytest.raises(ValueError):
        rle.encode(np.zeros((2, 2, 2), dtype=bool))


@given(arrays(dtype=bool, shape=st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_round_trip_property(mask):
    assert (rle.decode(rle.encode(mask)) == mask).all()
