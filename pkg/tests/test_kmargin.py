import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmargin_ecg.augmentation import SegmentArray, slide_and_cut
from kmargin_ecg.classifier import LookupClassifier
from kmargin_ecg.kmargin import (
    KSelection,
    alpha,
    alpha_gate_from_probs,
    k_labels,
    k_labels_from_probs,
    least_margin_segment,
    margin,
    most_confident_label,
    predict_from_probs,
    predict_record,
    segment_predictions,
    select_alpha_segments,
    vote,
)
from kmargin_ecg.signal_io import EcgRecord, make_classes

N, A, O, P = range(4)
CLASSES = make_classes()


def brute_force_klabels(probs, k):
    """Independent oracle: sort segments by (margin, index), take the first K."""
    keyed = []
    for t, row in enumerate(probs):
        s = sorted(row, reverse=True)
        top1 = max(range(len(row)), key=lambda j: (row[j], -j))
        keyed.append((s[1] - s[0], t, top1))
    keyed.sort()
    return [t for _, t, _ in keyed[:k]], [c for _, _, c in keyed[:k]]


def table_with(margins, top1s, m=4):
    """Probability rows with the given top-1 class and margin (runner-up is the next class)."""
    rows = []
    for mg, c in zip(margins, top1s):
        row = np.zeros(m)
        row[c] = (1 - mg) / 2
        row[(c + 1) % m] = (1 + mg) / 2
        rows.append(row)
    return np.array(rows)


def _array(probs):
    t = len(probs)
    segs = np.arange(t, dtype=float)[:, None] * np.ones((1, 4))
    arr = SegmentArray("r", segs, np.arange(t), CLASSES[0])
    clf = LookupClassifier(list(zip(segs, probs)))
    return arr, clf


def test_margin_examples():
    assert margin([0.7, 0.2, 0.1]) == pytest.approx(-0.5)
    assert margin([0.25] * 4) == 0.0
    assert margin([1, 0, 0, 0]) == -1.0
    with pytest.raises(ValueError):
        margin([1.0])


def test_least_margin_segment_examples():
    preds = segment_predictions(table_with([-0.5, -0.1, 0.0], [A, N, O]))
    assert [round(p.margin, 12) for p in preds] == [-0.5, -0.1, 0.0]
    assert least_margin_segment(preds) == 0
    assert least_margin_segment(segment_predictions(table_with([-0.3, -0.3], [A, N]))) == 0
    assert least_margin_segment(segment_predictions(table_with([-0.2], [O]))) == 0
    with pytest.raises(ValueError):
        least_margin_segment([])


def test_most_confident_label_examples():
    assert most_confident_label(segment_predictions(table_with([-0.5, -0.1], [A, N]))) == A
    assert most_confident_label(segment_predictions(table_with([-0.1, -0.6, -0.3], [N, N, N]))) == N
    assert most_confident_label(segment_predictions(table_with([-0.3, -0.3], [O, N]))) == O


def test_k_labels_example():
    probs = table_with([-0.9, -0.2, -0.5], [A, N, O])
    arr, clf = _array(probs)
    sel = k_labels(arr, 2, clf)
    assert sel.indices == (0, 2) and sel.labels == (A, O)
    np.testing.assert_array_equal(sel.onehot, [[0, 1, 0, 0], [0, 0, 1, 0]])


def test_k_equals_t_orders_everything():
    probs = table_with([-0.1, -0.7, -0.4, -0.7], [N, A, O, P])
    sel = k_labels_from_probs(probs, 4)
    assert sel.indices == (1, 3, 2, 0)


def test_k1_matches_eqs_3_and_4():
    probs = table_with([-0.1, -0.7, -0.4], [N, A, O])
    preds = segment_predictions(probs)
    sel = k_labels_from_probs(probs, 1)
    assert sel.indices == (least_margin_segment(preds),)
    assert sel.labels == (most_confident_label(preds),)


@pytest.mark.parametrize("k", [0, 4])
def test_k_out_of_range(k):
    with pytest.raises(ValueError):
        k_labels_from_probs(table_with([-0.1, -0.2, -0.3], [N, N, N]), k)


def _random_table(rng, t, m):
    if rng.random() < 0.3:
        # coarse values force margin ties
        raw = rng.integers(1, 4, size=(t, m)).astype(float)
    else:
        raw = rng.random((t, m))
    return raw / raw.sum(axis=1, keepdims=True)


def test_oracle_equivalence_random_tables():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        t, m = int(rng.integers(1, 21)), int(rng.integers(2, 7))
        k = int(rng.integers(1, t + 1))
        probs = _random_table(rng, t, m)
        sel = k_labels_from_probs(probs, k)
        idx, labels = brute_force_klabels(probs, k)
        assert list(sel.indices) == idx and list(sel.labels) == labels


def test_alpha_examples():
    assert alpha(segment_predictions([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]])) == pytest.approx(0.8)
    assert alpha(segment_predictions([[0.6, 0.4]])) == pytest.approx(0.6)
    assert alpha(segment_predictions(np.full((5, 4), 0.25))) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        alpha([])


def test_alpha_gate_branches():
    margins = [-0.9, -0.1, -0.5, -0.3, -0.7]
    confident = table_with(margins, [N] * 5)  # top-1 probs 0.95 .55 .75 .65 .85
    arr, clf = _array(confident)
    gate = select_alpha_segments(arr, 3, clf)
    assert gate.alpha == pytest.approx(0.75) and gate.confident
    assert gate.indices == (0, 4, 2)

    low = np.array([[0.3, 0.25, 0.25, 0.2]] * 5)
    low[:, 1] -= np.array([0.0, 0.04, 0.01, 0.03, 0.02])
    low[:, 2] += np.array([0.0, 0.04, 0.01, 0.03, 0.02])
    gate = alpha_gate_from_probs(low, 3)
    assert gate.alpha == pytest.approx(0.3) and not gate.confident
    top3 = set(k_labels_from_probs(low, 3).indices)
    assert set(gate.indices) == set(range(5)) - top3 and len(gate.indices) == 2


def test_alpha_exactly_half_takes_second_branch():
    probs = np.array([[0.5, 0.3, 0.2], [0.5, 0.1, 0.4], [0.5, 0.25, 0.25]])
    gate = alpha_gate_from_probs(probs, 1)
    assert gate.alpha == 0.5
    assert not gate.confident and gate.branch == "complement"


def test_alpha_gate_empty_complement_falls_back_with_warning():
    probs = np.full((3, 4), 0.25)
    with pytest.warns(RuntimeWarning, match="K equals T"):
        gate = alpha_gate_from_probs(probs, 3)
    assert gate.indices == (0, 1, 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 20), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_alpha_branches_partition(t, m, seed):
    rng = np.random.default_rng(seed)
    probs = _random_table(rng, t, m)
    k = int(rng.integers(1, t))
    top = set(k_labels_from_probs(probs, k).indices)
    rest = set(range(t)) - top
    assert top | rest == set(range(t)) and not top & rest
    gate = alpha_gate_from_probs(probs, k)
    assert set(gate.indices) == (top if gate.alpha > 0.5 else rest)


def test_vote_examples():
    assert vote(KSelection((0, 1, 2), (A, A, N), 4)) == A
    assert vote(KSelection((0, 1), (A, N), 4)) == A
    assert vote(KSelection((5,), (O,), 4)) == O


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 15), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_vote_klabels_permutation_invariant(t, m, seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((t, m)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    margins = [margin(p) for p in probs]
    if len(set(margins)) < t:
        return
    k = int(rng.integers(1, t + 1))
    perm = rng.permutation(t)
    assert predict_from_probs(probs, k) == predict_from_probs(probs[perm], k)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 15), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_rescaling_preserving_gaps_keeps_selection(t, m, seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((t, m)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    k = int(rng.integers(1, t + 1))
    # sharpening toward the uniform-free direction: p' = (p + c) / (1 + m c) is affine per row,
    # keeps every argmax and scales every (top1 - top2) gap by the same 1 / (1 + m c)
    c = float(rng.uniform(0.01, 2.0))
    rescaled = (probs + c) / (1 + m * c)
    assert set(k_labels_from_probs(probs, k).indices) == set(k_labels_from_probs(rescaled, k).indices)


def test_predict_record_single_segment():
    rec = EcgRecord("x", np.arange(1.0, 51.0), label=CLASSES[0])
    arr = slide_and_cut(rec, 100, 10)
    clf = LookupClassifier([(arr.segments[0], [0.1, 0.2, 0.6, 0.1])])
    assert predict_record(rec, clf, 100, 10, 3) == O


def test_predict_record_unanimous():
    rec = EcgRecord("x", np.arange(1.0, 101.0))
    arr = slide_and_cut(rec, 40, 10)
    rng = np.random.default_rng(0)
    table = []
    for s in arr.segments:
        p = rng.random(4) * 0.2
        p[A] = 1.0
        table.append((s, p / p.sum()))
    assert predict_record(rec, LookupClassifier(table), 40, 10, 3) == A


def test_predict_record_clean_segments_outvote_noisy():
    rec = EcgRecord("x", np.arange(1.0, 91.0))
    arr = slide_and_cut(rec, 30, 10)
    assert len(arr) == 7
    clean = [[0.08, 0.80, 0.06, 0.06], [0.05, 0.85, 0.05, 0.05], [0.15, 0.70, 0.10, 0.05],
             [0.10, 0.75, 0.10, 0.05], [0.20, 0.60, 0.10, 0.10]]
    noisy = [[0.25, 0.24, 0.24, 0.27], [0.24, 0.25, 0.25, 0.26]]
    probs = [clean[0], noisy[0], clean[1], clean[2], noisy[1], clean[3], clean[4]]
    clf = LookupClassifier(list(zip(arr.segments, probs)))
    # by hand: margins of the clean rows are -0.72, -0.80, -0.55, -0.65, -0.40; noisy ones -0.02, -0.01
    idx, labels = brute_force_klabels(np.array(probs), 3)
    assert idx == [2, 0, 5] and labels == [A, A, A]
    assert predict_record(rec, clf, 30, 10, 3) == A


def test_predict_record_k1_matches_most_confident_label():
    rng = np.random.default_rng(5)
    rec = EcgRecord("x", rng.normal(size=120))
    arr = slide_and_cut(rec, 30, 7)
    probs = rng.dirichlet(np.ones(4), size=len(arr))
    clf = LookupClassifier(list(zip(arr.segments, probs)))
    assert predict_record(rec, clf, 30, 7, 1) == most_confident_label(segment_predictions(probs))


def test_predict_record_rejects_bad_k():
    rec = EcgRecord("x", np.ones(10))
    with pytest.raises(ValueError):
        predict_record(rec, LookupClassifier([], num_classes=4), 10, 1, 0)


# ---------------------------------------------------------------------------
# two-phase training

from kmargin_ecg.classifier import RcrConfig, build_model, train  # noqa: E402
from kmargin_ecg.kmargin import TrainConfig, flatten, train_with_selection  # noqa: E402

SMALL = dict(window_size=60, num_blocks=1, channels=3, kernel_size=5, pool_stride=2, hidden_size=4, n_split=5)


def _arrays(n_rec=4, length=140, stride=20):
    rng = np.random.default_rng(11)
    arrays = []
    for i in range(n_rec):
        rec = EcgRecord(f"r{i}", rng.normal(size=length), label=CLASSES[i % 4])
        arrays.append(slide_and_cut(rec, 60, stride))
    return arrays


class _ScoreBySum:
    """Confident scorer whose margin ordering follows the segment sum."""

    num_classes = 4

    def predict_proba(self, segment):
        top = 0.6 + 0.39 / (1.0 + np.exp(-np.sum(segment)))
        p = np.full(4, (1 - top) / 3)
        p[0] = top
        return p


class _Unsure:
    num_classes = 4

    def predict_proba(self, segment):
        p = np.array([0.4, 0.2, 0.2, 0.2])
        p[1] += 1e-3 * np.tanh(np.sum(segment))
        return p / p.sum()


def test_warmup_only_equals_plain_training():
    arrays = _arrays()
    a = build_model(RcrConfig(**SMALL))
    b = build_model(RcrConfig(**SMALL))
    res = train_with_selection(a, arrays, TrainConfig(k=2, warmup_epochs=2, select_epochs=0, lr=0.05, seed=4))
    x, y = flatten(arrays)
    _, trace = train(b, x, y, 2, lr=0.05, seed=4)
    assert res.loss_trace == trace and res.selections == []
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_confident_selector_picks_exactly_k_least_margin_segments():
    arrays = _arrays()
    scorer = _ScoreBySum()
    res = train_with_selection(build_model(RcrConfig(**SMALL)), arrays,
                               TrainConfig(k=2, warmup_epochs=0, select_epochs=2, lr=0.01), selector=scorer)
    assert len(res.selections) == 2 * len(arrays) and len(res.loss_trace) == 2
    by_id = {a.record_id: a for a in arrays}
    for e in res.selections:
        assert e.branch == "topk" and len(e.indices) == 2
        probs = np.stack([scorer.predict_proba(s) for s in by_id[e.record_id].segments])
        assert list(e.indices) == brute_force_klabels(probs, 2)[0]


def test_unsure_selector_trains_on_the_complement():
    arrays = _arrays()
    res = train_with_selection(build_model(RcrConfig(**SMALL)), arrays,
                               TrainConfig(k=2, warmup_epochs=0, select_epochs=1), selector=_Unsure())
    for e, arr in zip(res.selections, arrays):
        assert e.branch == "complement" and len(e.indices) == len(arr) - 2


def test_selection_loss_weighs_records_equally():
    # one record with many segments, one with few: with lr = 0 the epoch loss is
    # the mean over records of the per-record mean loss
    rng = np.random.default_rng(3)
    long_rec = EcgRecord("long", rng.normal(size=400), label=CLASSES[0])
    short_rec = EcgRecord("short", rng.normal(size=80), label=CLASSES[1])
    arrays = [slide_and_cut(long_rec, 60, 10), slide_and_cut(short_rec, 60, 10)]
    model = build_model(RcrConfig(**SMALL))
    res = train_with_selection(model, arrays, TrainConfig(k=1, warmup_epochs=0, select_epochs=1, lr=0.0),
                               selector=_Unsure())
    per_record = []
    for e, arr in zip(res.selections, arrays):
        idx = list(e.indices)
        logp = np.log(model.predict_proba_batch(arr.segments[idx]))
        per_record.append(-logp[:, arr.label.index].mean())
    assert res.loss_trace[0] == pytest.approx(np.mean(per_record), rel=1e-12)


def test_train_with_selection_rejects_bad_width():
    arrays = _arrays()
    model = build_model(RcrConfig(**{**SMALL, "window_size": 120, "n_split": 6}))
    with pytest.raises(ValueError, match="width"):
        train_with_selection(model, arrays, TrainConfig())
    with pytest.raises(ValueError):
        train_with_selection(model, [], TrainConfig())
