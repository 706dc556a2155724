from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg.pasting import (
    EmptyPseudoLabel,
    PairingSpecError,
    PlusSetSpec,
    build_plus_set,
    make_pairing,
    paste_sample,
)
from promptseg.volume import BinaryMask, Volume


def _vol(seed, dims=(8, 8, 8)):
    return Volume(np.random.default_rng(seed).uniform(50, 150, dims), (1, 1, 1))


def _label(dims=(8, 8, 8), lo=2, hi=6):
    a = np.zeros(dims, bool)
    a[lo:hi, lo:hi, lo:hi] = True
    return BinaryMask(a, (1, 1, 1))


def test_empty_label_is_identity_then_rejected():
    s, x = _vol(0), _vol(1)
    out = paste_sample(s, BinaryMask(np.zeros((8, 8, 8), bool), (1, 1, 1)), x, min_voxels=0)
    assert np.array_equal(out.image.data, x.data)
    with pytest.raises(EmptyPseudoLabel):
        paste_sample(s, BinaryMask(np.zeros((8, 8, 8), bool), (1, 1, 1)), x)


def test_full_label_copies_source():
    s, x = _vol(0), _vol(1)
    out = paste_sample(s, BinaryMask(np.ones((8, 8, 8), bool), (1, 1, 1)), x)
    assert np.array_equal(out.image.data, s.data)
    assert out.mask.count == 512


def test_paste_formula():
    s, x, p = _vol(0), _vol(1), _label()
    out = paste_sample(s, p, x)
    assert np.array_equal(out.image.data[p.data], s.data[p.data])
    assert np.array_equal(out.image.data[~p.data], x.data[~p.data])
    assert np.array_equal(out.mask.data, p.data)


def test_mismatched_dims_resampled():
    s = Volume(np.full((32, 32, 32), 7.0), (2, 2, 2))
    p = BinaryMask(_label((32, 32, 32), 8, 20).data, (2, 2, 2))
    x = Volume(np.full((64, 64, 64), 1.0), (1, 1, 1))
    out = paste_sample(s, p, x)
    assert out.image.dims == (64, 64, 64)
    assert out.mask.data.dtype == bool
    assert out.mask.count == 8 * p.count
    assert set(np.unique(out.image.data)) == {1.0, 7.0}


def test_renormalize_matches_target_mean():
    s = Volume(np.full((8, 8, 8), 200.0), (1, 1, 1))
    x = Volume(np.full((8, 8, 8), 100.0), (1, 1, 1))
    out = paste_sample(s, _label(), x, renormalize=True)
    assert np.allclose(out.image.data, 100.0)


def test_pairing_counts_100_200():
    spec = PlusSetSpec(100, 200, 2, 1, seed=3)
    pairs = make_pairing(spec)
    assert len(pairs) == 200
    assert all(c == 2 for c in Counter(j for j, _ in pairs).values())
    assert sorted(i for _, i in pairs) == list(range(200))
    assert pairs == make_pairing(spec)


def test_pairing_mismatch():
    with pytest.raises(PairingSpecError, match="200 != 150"):
        PlusSetSpec(100, 150, 2, 1)


def test_single_pair():
    plus = build_plus_set([(_vol(0), _label())], [_vol(1)], PlusSetSpec(1, 1, 1, 1))
    assert len(plus.pasted) == 1
    assert len(plus.training_set) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_pairing_is_perfect_cover(m, up, uf, seed):
    total = m * up
    if total % uf:
        with pytest.raises(PairingSpecError):
            PlusSetSpec(m, total // uf + 1, up, uf)
        return
    n = total // uf
    pairs = make_pairing(PlusSetSpec(m, n, up, uf, seed=seed))
    assert Counter(j for j, _ in pairs) == Counter({j: up for j in range(m)})
    assert Counter(i for _, i in pairs) == Counter({i: uf for i in range(n)})


def test_build_plus_set_skips_tiny_labels(caplog):
    tiny = BinaryMask(np.zeros((8, 8, 8), bool), (1, 1, 1))
    unlabeled = [(_vol(0), _label()), (_vol(1), tiny)]
    free = [_vol(k) for k in range(2, 6)]
    plus = build_plus_set(unlabeled, free, PlusSetSpec(2, 4, 2, 1, seed=1), ["a", "b"])
    assert len(plus.skipped) == 2
    assert len(plus.pasted) == 2
    assert all(plus.pairing[k][0] == 1 for k in plus.skipped)
    assert all(s.provenance.extra["pseudo_label"] == "a" for s in plus.pasted)
    assert "skipping pair" in caplog.text


def test_build_plus_set_count_check():
    with pytest.raises(PairingSpecError):
        build_plus_set([(_vol(0), _label())], [_vol(1)], PlusSetSpec(1, 2, 2, 1))
