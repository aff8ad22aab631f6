import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import pair_auc, pair_cindex
from mew.errors import NoComparablePairs, SingleClass
from mew.metrics import auc_roc, c_index, concordance


def test_auc_examples():
    assert auc_roc([0.9, 0.1], [1, 0]) == 1.0
    assert auc_roc([0.1, 0.9], [1, 0]) == 0.0
    assert auc_roc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(SingleClass):
        auc_roc([0.1, 0.2], [1, 1])


def test_cindex_examples():
    assert c_index([2.0, 1.0], [1.0, 2.0], [1, 1]) == 1.0
    assert c_index([1.0, 2.0], [1.0, 2.0], [1, 0]) == 0.0
    c = concordance([1.0, 1.0, 0.0], [1.0, 2.0, 3.0], [1, 0, 0])
    assert (c.comparable, c.concordant, c.tied_risk) == (2, 1, 1) and c.index == 0.75
    with pytest.raises(NoComparablePairs):
        c_index([1.0, 2.0], [1.0, 2.0], [0, 0])
    with pytest.raises(NoComparablePairs):
        c_index([1.0, 2.0], [3.0, 3.0], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_auc_matches_pair_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = rng.integers(0, 5, n).astype(float)  # frequent ties
    assert auc_roc(s, y) == pytest.approx(pair_auc(s, y), abs=1e-12)
    # strictly monotone transforms leave the ranking alone
    assert auc_roc(np.exp(s) * 3 - 1, y) == pytest.approx(auc_roc(s, y), abs=1e-12)
    assert auc_roc(-s, y) == pytest.approx(1 - auc_roc(s, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_cindex_matches_pair_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    t = rng.integers(1, 8, n).astype(float)
    e = rng.integers(0, 2, n)
    r = rng.integers(0, 4, n).astype(float)
    t[:2] = [1.0, 2.0]
    e[0] = 1
    assert c_index(r, t, e) == pytest.approx(pair_cindex(r, t, e), abs=1e-12)
    perm = rng.permutation(n)
    assert c_index(r[perm], t[perm], e[perm]) == pytest.approx(c_index(r, t, e), abs=1e-12)
    assert c_index(2 * r + 5, t, e) == pytest.approx(c_index(r, t, e), abs=1e-12)
