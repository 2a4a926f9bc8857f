import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sense.errors import InputError
from sense.evaluation import (
    PUBLISHED_RUNTIME_MS,
    average_precision,
    benchmark,
    binary_iou,
    evaluate_referring,
    referring_miou,
    referring_report,
    zero_shot_miou,
)


def _brute_iou(pred, target):
    inter = union = 0
    for p, t in zip(pred.ravel(), target.ravel()):
        inter += bool(p and t)
        union += bool(p or t)
    return 1.0 if union == 0 else inter / union


def _brute_ap(scores, labels):
    """Threshold sweep: at each distinct score, precision times recall gained."""
    scores, labels = scores.ravel(), labels.ravel().astype(bool)
    n_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= t
        tp = np.logical_and(sel, labels).sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / sel.sum())
        prev_recall = recall
    return ap


def test_iou_examples():
    t = np.zeros((10, 10), bool)
    t[:5] = True
    assert binary_iou(t.astype(float), t) == 1.0
    assert binary_iou((~t).astype(float), t) == 0.0
    target = np.zeros((10, 20), bool)
    target[:, :10] = True  # 100 px
    pred = np.zeros((10, 20))
    pred[:5, :10] = 1.0  # covers 50 px, no false positives
    assert binary_iou(pred, target) == 0.5
    assert binary_iou(np.zeros((3, 3)), np.zeros((3, 3), bool)) == 1.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 8), w=st.integers(1, 8))
def test_iou_matches_brute_force(seed, h, w):
    rng = np.random.default_rng(seed)
    pred, target = rng.random((h, w)), rng.random((h, w)) > 0.5
    for region in ("foreground", "background"):
        p, t = pred >= 0.5, target
        if region == "background":
            p, t = ~p, ~t
        got = binary_iou(pred, target, region=region)
        assert got == _brute_iou(p, t)
        assert 0.0 <= got <= 1.0


def test_iou_void_pixels_excluded():
    pred = np.array([[1.0, 0.0]])
    target = np.array([[True, True]])
    assert binary_iou(pred, target, void=np.array([[False, True]])) == 1.0


def test_referring_miou_examples():
    t = np.zeros((4, 4), bool)
    t[:2] = True
    assert referring_miou([t.astype(float)], [t]) == 1.0
    # all-foreground prediction: fg IoU = 8/16, bg IoU = 0/8
    assert referring_miou([np.ones((4, 4))], [t]) == 0.25
    assert referring_miou([np.ones((4, 4))], [t], foreground_only=True) == 0.5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_referring_miou_role_symmetry(seed):
    rng = np.random.default_rng(seed)
    p, t = (rng.random((6, 6)) > 0.5).astype(float), rng.random((6, 6)) > 0.5
    assert referring_miou([p], [t]) == pytest.approx(referring_miou([1 - p], [~t]))


def test_ap_perfect_and_reverse():
    labels = np.array([1, 1, 0, 0, 0])
    assert average_precision(np.array([0.9, 0.8, 0.3, 0.2, 0.1]), labels) == 1.0
    # N = 4 with the only positive ranked last: precision 1/4 at recall 1
    assert average_precision(np.array([0.1, 0.9, 0.8, 0.7]), np.array([1, 0, 0, 0])) == 0.25


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 8), w=st.integers(2, 8), levels=st.sampled_from([3, 10, 1000]))
def test_ap_matches_threshold_sweep(seed, h, w, levels):
    rng = np.random.default_rng(seed)
    labels = rng.random((h, w)) > 0.5
    labels.flat[0], labels.flat[1] = True, False
    scores = rng.integers(0, levels, (h, w)) / levels  # ties when levels is small
    assert average_precision(scores, labels) == pytest.approx(_brute_ap(scores, labels), abs=1e-12)


def test_ap_random_scores_monte_carlo():
    values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        labels = np.arange(20_000) % 2 == 0
        values.append(average_precision(rng.random(20_000), labels))
    assert abs(np.mean(values) - 0.5) < 0.05
    assert all(abs(v - 0.5) < 0.05 for v in values)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ap_monotone_when_positive_promoted(seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(12) > 0.5
    labels[0], labels[1] = True, False
    scores = rng.permutation(12).astype(float)
    base = average_precision(scores, labels)
    pos = np.nonzero(labels)[0]
    i = pos[rng.integers(len(pos))]
    scores2 = scores.copy()
    scores2[i] = scores.max() + 1
    assert average_precision(scores2, labels) >= base - 1e-12


def test_ap_degenerate_labels():
    with pytest.raises(InputError):
        average_precision(np.array([0.1, 0.2]), np.array([1, 1]))
    with pytest.raises(InputError):
        average_precision(np.array([0.1, 0.2]), np.array([0, 0]))


def test_zero_shot_examples():
    gt = np.array([[0, 0, 1, 1]])
    assert zero_shot_miou(gt.copy(), gt, ["a", "b", "c"]).miou == 1.0
    rep = zero_shot_miou(np.array([[0, 0, 0, 0]]), np.array([[0, 0, 0, 0]]), ["a", "b"])
    assert rep.per_class_iou == {"a": 1.0}
    # class b fully wrong (predicted as c), class a perfect
    rep = zero_shot_miou(np.array([[0, 0, 2, 2]]), gt, ["a", "b", "c"])
    assert rep.per_class_iou == {"a": 1.0, "b": 0.0}
    assert rep.miou == 0.5
    with pytest.raises(InputError):
        zero_shot_miou(np.zeros((2, 2), int), np.full((2, 2), 255), ["a"])


def test_zero_shot_void_excluded():
    gt = np.array([[0, 255, 1]])
    seg = np.array([[0, 1, 1]])
    assert zero_shot_miou(seg, gt, ["a", "b"]).miou == 1.0


def test_report_determinism_and_bounds():
    rng = np.random.default_rng(3)
    probs = [rng.random((8, 8)) for _ in range(3)]
    targets = [rng.random((8, 8)) > 0.5 for _ in range(3)]
    a, b = referring_report(probs, targets), referring_report(probs, targets)
    assert a == b
    for v in (a.miou, a.iou_fg, a.ap):
        assert 0 <= v <= 1
    assert a.ap == pytest.approx(_brute_ap(np.concatenate([p.ravel() for p in probs]),
                                           np.concatenate([t.ravel() for t in targets])))


def test_evaluate_referring_runs(small_model, corpus64):
    rep = evaluate_referring(small_model, corpus64[0])
    assert rep.n_samples == 6 and 0 <= rep.miou <= 1 and 0 <= rep.ap <= 1


def test_benchmark_ordering_and_reporting(small_model):
    img = np.zeros((64, 64, 3), np.uint8)
    d = np.zeros((64, 64), np.float32)
    for repeats in (1, 3):
        rep = benchmark(small_model, img, img, "red circle", lambda: d.copy(), repeats=repeats)
        assert rep.repeats == repeats
        assert rep.total_without_disparity_ms <= rep.total_ms
        parts = rep.encode_ms + rep.decode_ms + rep.tiling_ms + rep.disparity_ms
        assert rep.total_ms >= parts - 1e-9
        assert rep.reference_ms == PUBLISHED_RUNTIME_MS
    with pytest.raises(InputError):
        benchmark(small_model, img, img, "x", lambda: d, repeats=0)


def test_published_reference_figures():
    # Table 2: 194.74 ms total, 17.12 ms without stereo matching
    assert PUBLISHED_RUNTIME_MS["SENSE-352"] == (194.74, 17.12)
