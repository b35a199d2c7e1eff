import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmargin_ecg.augmentation import AugmentConfig, augment_dataset, compute_strides, slide_and_cut
from kmargin_ecg.signal_io import Dataset, EcgRecord, make_classes

CLASSES = make_classes()


def _record(n, label=0, rid="r"):
    return EcgRecord(rid, np.arange(1, n + 1, dtype=float), label=CLASSES[label])


@pytest.mark.parametrize(
    "counts, ms, expected",
    [([100, 100], 500, [500, 500]), ([100, 25], 500, [500, 125]), ([7, 3], 10, [10, 5])],
)
def test_stride_examples(counts, ms, expected):
    assert compute_strides(counts, ms).tolist() == expected


def test_stride_zero_count_class_gets_max():
    assert compute_strides([4, 0, 2], 10).tolist() == [10, 10, 5]


def test_stride_all_zero_rejected():
    with pytest.raises(ValueError):
        compute_strides([0, 0], 10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=8).filter(lambda c: max(c) > 0), st.integers(1, 5000))
def test_stride_properties(counts, ms):
    s = compute_strides(counts, ms)
    top = max(counts)
    for c, sc in zip(counts, s):
        assert 1 <= sc <= ms
        if c == top:
            assert sc == ms
    nonzero = [(c, sc) for c, sc in zip(counts, s) if c > 0]
    for ca, sa in nonzero:
        for cb, sb in nonzero:
            if ca <= cb:
                assert sa <= sb


def test_exact_fit_single_segment():
    arr = slide_and_cut(_record(6000), 6000, 123)
    assert len(arr) == 1 and arr.pad_len == 0
    np.testing.assert_array_equal(arr.segments[0], np.arange(1, 6001))


def test_short_record_zero_padded():
    arr = slide_and_cut(_record(4000), 6000, 500)
    assert len(arr) == 1 and arr.pad_len == 2000
    assert np.all(arr.segments[0, 4000:] == 0.0)
    np.testing.assert_array_equal(arr.segments[0, :4000], np.arange(1, 4001))


def test_offsets_match_enumeration():
    # every start o with o + w <= len and o % s == 0
    expected = [o for o in range(0, 9000) if o + 6000 <= 9000 and o % 500 == 0]
    arr = slide_and_cut(_record(9000), 6000, 500)
    assert len(arr) == 7
    assert arr.offsets.tolist() == expected == [0, 500, 1000, 1500, 2000, 2500, 3000]


def test_trailing_partial_window_dropped():
    arr = slide_and_cut(_record(6700), 6000, 500)
    assert arr.offsets.tolist() == [0, 500]
    assert arr.pad_len == 0


def test_labels_propagate():
    arr = slide_and_cut(_record(900, label=2), 100, 50)
    assert set(arr.labels().tolist()) == {2}
    assert len(arr.labels()) == len(arr)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.integers(1, 120), st.integers(1, 60))
def test_reconstruction(n, w, s):
    rec = _record(n)
    arr = slide_and_cut(rec, w, s)
    assert arr.segments.shape[1] == w
    if n < w:
        assert len(arr) == 1
    else:
        assert len(arr) == (n - w) // s + 1
        for t, o in enumerate(arr.offsets):
            assert o == t * s
            np.testing.assert_array_equal(arr.segments[t], rec.samples[o:o + w])


def test_augment_dataset_example():
    # counts 10:1 with MS 500 -> strides 500 and 50; 9000-sample records, w=6000
    records = [_record(9000, 0, "maj")] + [_record(10, 0, f"m{i}") for i in range(9)] + [_record(9000, 1, "rare")]
    ds = Dataset(records, CLASSES)
    arrays = augment_dataset(ds, AugmentConfig(6000, 500))
    by_id = {a.record_id: a for a in arrays}
    assert by_id["maj"].stride == 500 and len(by_id["maj"]) == 7
    assert by_id["rare"].stride == 50 and len(by_id["rare"]) == 61
    assert len(by_id["m0"]) == 1  # shorter than the window
    assert [a.record_id for a in arrays] == [r.id for r in records]


def test_augment_single_class_uses_max_stride():
    ds = Dataset([_record(8000, 2, f"r{i}") for i in range(3)], CLASSES)
    assert {a.stride for a in augment_dataset(ds, AugmentConfig(6000, 500))} == {500}


def test_augment_rejects_empty_and_unlabeled():
    with pytest.raises(ValueError):
        augment_dataset(Dataset([], CLASSES), AugmentConfig())
    unlabeled = Dataset([EcgRecord("u", [1.0, 2.0])], CLASSES)
    with pytest.raises(ValueError):
        augment_dataset(unlabeled, AugmentConfig())


def test_bad_window_or_stride():
    with pytest.raises(ValueError):
        slide_and_cut(_record(10), 0, 1)
    with pytest.raises(ValueError):
        AugmentConfig(10, 0)
