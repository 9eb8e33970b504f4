import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mavlkit.geometry import Box, Detection, GroundTruthBox, iou
from mavlkit.pseudo_label import (PseudoLabelConfig, generate_unknown_pseudo_labels, max_known_iou,
                                  pseudo_label_dataset)

KNOWN = [GroundTruthBox(0, Box(0, 0, 10, 10))]


def _p(box, score, image_id=0):
    return Detection(image_id, Box(*box), score)


def test_examples():
    assert generate_unknown_pseudo_labels([_p((50, 50, 60, 60), 0.65)], KNOWN) == []
    overlap = _p((0, 0, 10, 6), 0.8)  # IoU 0.6
    assert iou(overlap.box, KNOWN[0].box) == pytest.approx(0.6)
    assert generate_unknown_pseudo_labels([overlap], KNOWN) == []
    low = _p((0, 0, 10, 3), 0.8)  # IoU 0.3
    assert generate_unknown_pseudo_labels([low], KNOWN) == [low]
    assert generate_unknown_pseudo_labels([], []) == []


def test_boundaries_are_kept():
    at = [_p((50, 50, 60, 60), 0.7), _p((0, 0, 10, 5), 0.9)]  # score 0.7, IoU 0.5
    assert generate_unknown_pseudo_labels(at, KNOWN) == at


def test_unknown_gt_does_not_suppress():
    unknown_gt = [GroundTruthBox(0, Box(0, 0, 10, 10), known=False)]
    p = [_p((0, 0, 10, 10), 0.9)]
    assert generate_unknown_pseudo_labels(p, unknown_gt) == p


def test_single_image_precondition():
    with pytest.raises(ValueError):
        generate_unknown_pseudo_labels([_p((0, 0, 1, 1), 0.9, 1)], KNOWN)
    with pytest.raises(ValueError):
        PseudoLabelConfig(min_score=1.5)


def test_optional_nms_keeps_input_order():
    props = [_p((50, 50, 60, 60), 0.75), _p((51, 51, 61, 61), 0.95), _p((80, 80, 90, 90), 0.8)]
    out = generate_unknown_pseudo_labels(props, KNOWN, PseudoLabelConfig(nms_thresh=0.5))
    assert out == [props[1], props[2]]


def _instance(seed):
    rng = np.random.default_rng(seed)
    props = []
    for _ in range(int(rng.integers(0, 15))):
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(2, 20, 2)
        props.append(_p((x, y, x + w, y + h), float(rng.uniform())))
    known = []
    for _ in range(int(rng.integers(0, 5))):
        x, y = rng.uniform(0, 40, 2)
        known.append(GroundTruthBox(0, Box(x, y, x + 12, y + 12)))
    return props, known


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 1), st.floats(0, 1))
def test_predicates_subsequence_and_idempotence(seed, s, o):
    props, known = _instance(seed)
    cfg = PseudoLabelConfig(s, o)
    out = generate_unknown_pseudo_labels(props, known, cfg)
    for d in out:
        assert d.score >= s
        assert all(iou(d.box, g.box) <= o for g in known)
    it = iter(props)
    assert all(any(d is p for p in it) for d in out)  # order-preserving subsequence
    assert generate_unknown_pseudo_labels(out, known, cfg) == out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_monotone_in_both_thresholds(seed, s1, s2, o1, o2):
    props, known = _instance(seed)
    lo_s, hi_s = sorted((s1, s2))
    lo_o, hi_o = sorted((o1, o2))
    loose = generate_unknown_pseudo_labels(props, known, PseudoLabelConfig(lo_s, hi_o))
    strict = generate_unknown_pseudo_labels(props, known, PseudoLabelConfig(hi_s, lo_o))
    assert {id(d) for d in strict} <= {id(d) for d in loose}


def test_max_known_iou_and_dataset_split():
    props = [_p((0, 0, 10, 5), 0.9, 0), _p((0, 0, 10, 5), 0.9, 1)]
    np.testing.assert_allclose(max_known_iou(props[:1], KNOWN), [0.5])
    assert max_known_iou(props, []).tolist() == [0.0, 0.0]
    out = pseudo_label_dataset(props, [GroundTruthBox(1, Box(0, 0, 10, 6))], PseudoLabelConfig(max_known_iou=0.4))
    assert out == [props[0]]
