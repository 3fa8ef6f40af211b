import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtworkflow.seeding import SeedSpec, as_seed


def test_same_keys_same_stream():
    a = SeedSpec(5).rng(1, 2).standard_normal(10)
    b = SeedSpec(5).rng(1, 2).standard_normal(10)
    np.testing.assert_array_equal(a, b)


def test_child_composes_keys():
    np.testing.assert_array_equal(SeedSpec(5).child(1).rng(2).random(5), SeedSpec(5).rng(1, 2).random(5))


@given(st.integers(0, 2**63), st.lists(st.integers(0, 1000), min_size=1, max_size=3),
       st.lists(st.integers(0, 1000), min_size=1, max_size=3))
@settings(max_examples=50, deadline=None)
def test_distinct_keys_distinct_streams(master, k1, k2):
    if k1 == k2:
        return
    a = SeedSpec(master).rng(*k1).integers(0, 2**63, 4)
    b = SeedSpec(master).rng(*k2).integers(0, 2**63, 4)
    assert not np.array_equal(a, b)


def test_as_seed():
    assert as_seed(None) == SeedSpec()
    assert as_seed(7) == SeedSpec(7)
    s = SeedSpec(3, (1,))
    assert as_seed(s) is s
    with pytest.raises(ValueError):
        SeedSpec(-1)
