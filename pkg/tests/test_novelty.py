import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikedet.errors import ConfigurationError, ContractViolation
from spikedet.geometry import BBox, Detection, iou
from spikedet.novelty import (
    NoveltyCandidate,
    NoveltyConfig,
    candidates_from_json,
    candidates_to_json,
    discover,
    filter_background,
    q_score,
)
from spikedet.pipeline import InferenceOutput, RpnOutput

BG = (0.9, 0.05, 0.05)
CAR = (0.05, 0.9, 0.05)


def _det(box, probs=BG):
    return Detection(BBox(*box), probs)


def _record(known, bg, pre_boxes, pre_scores):
    pre_boxes = np.asarray(pre_boxes, dtype=np.float64).reshape(-1, 4)
    rpn = RpnOutput([pre_boxes], [np.asarray(pre_scores, dtype=np.float64)], pre_boxes[:0], np.zeros(0))
    return InferenceOutput([_det(b, CAR) for b in known], [_det(b) for b in bg], rpn)


def test_config_and_candidate_invariants():
    with pytest.raises(ConfigurationError):
        NoveltyConfig(-0.1)
    with pytest.raises(ContractViolation):
        NoveltyCandidate(BBox(0, 0, 1, 1), -1.0, 1)


def test_q_score_example():
    bg = BBox(0, 0, 10, 10)
    pre = [[0, 0, 10, 5], [20, 20, 30, 30], [0, 0, 2, 10]]  # IoU 0.5, 0, 0.2
    q, support = q_score(bg, pre, [0.9, 0.8, 0.5])
    assert support == 2
    assert q == pytest.approx(0.275, abs=1e-12)


def test_q_score_no_overlap_and_identity():
    assert q_score(BBox(0, 0, 1, 1), [[5, 5, 6, 6]], [0.9]) == (0.0, 0)
    assert q_score(BBox(0, 0, 1, 1), np.zeros((0, 4)), np.zeros(0)) == (0.0, 0)
    assert q_score(BBox(2, 2, 6, 7), [[2, 2, 6, 7]], [0.63]) == (pytest.approx(0.63), 1)


def test_strict_zero_overlap_filter():
    known = [(0, 0, 10, 10)]
    touching = (9.9, 0, 30, 10)  # tiny overlap
    assert 0 < iou(BBox(*touching), BBox(*known[0])) < 0.01
    rec = _record(known, [touching, (40, 40, 50, 50)], [[0, 0, 1, 1]], [0.5])
    assert [d.box.as_tuple() for d in filter_background(rec)] == [(40, 40, 50, 50)]


def test_no_known_detections_keeps_every_background_prediction():
    rec = _record([], [(0, 0, 5, 5), (1, 1, 4, 4)], [[0, 0, 1, 1]], [0.5])
    assert len(filter_background(rec)) == 2


def test_four_background_against_two_known_hand_table():
    known = [(0, 0, 10, 10), (30, 30, 40, 40)]
    bg = [
        (5, 5, 15, 15),  # overlaps known 0
        (10, 0, 20, 10),  # shares an edge with known 0: IoU 0
        (35, 20, 45, 32),  # overlaps known 1
        (50, 50, 60, 60),  # clear of both
    ]
    table = [[iou(BBox(*b), BBox(*k)) for k in known] for b in bg]
    assert [all(v == 0 for v in row) for row in table] == [False, True, False, True]
    rec = _record(known, bg, [[0, 0, 1, 1]], [0.5])
    assert [d.box.as_tuple() for d in filter_background(rec)] == [bg[1], bg[3]]


def test_discover_requires_pre_nms_proposals():
    rec = InferenceOutput([], [_det((0, 0, 4, 4))], None)
    with pytest.raises(ContractViolation):
        discover(rec, NoveltyConfig(0.0))


def _fixture():
    # one unknown object at (20,20,36,36) covered by confident proposals,
    # one empty region at (0,40,12,52) touched only by a weak proposal,
    # one known car at (40,0,60,16)
    known = [(40, 0, 60, 16)]
    bg = [(0, 40, 12, 52), (20, 20, 36, 36)]
    pre = [[20, 20, 36, 36], [22, 18, 38, 34], [18, 22, 34, 38], [0, 44, 12, 56], [40, 0, 60, 16]]
    scores = [0.9, 0.8, 0.7, 0.1, 0.95]
    return _record(known, bg, pre, scores)


def test_fixture_scene_by_hand():
    rec = _fixture()
    # unknown: IoU 1 with the first, 14*14/(256+256-196) with the other two
    u = 196 / 316
    q_obj = (0.9 + u * 0.8 + u * 0.7) / 3
    # empty region: 12*8 / (144+144-96) = 0.5, single support
    q_empty = 0.5 * 0.1
    out = discover(rec, NoveltyConfig(0.2))
    assert len(out) == 1
    assert out[0].box == BBox(20, 20, 36, 36)
    assert out[0].q == pytest.approx(q_obj, abs=1e-12)
    assert out[0].support_count == 3
    low = discover(rec, NoveltyConfig(0.0))
    assert [c.q for c in low] == pytest.approx([q_obj, q_empty])


def test_huge_threshold_gives_nothing():
    assert discover(_fixture(), NoveltyConfig(1e9)) == []


def test_candidate_json_round_trip():
    cands = discover(_fixture(), NoveltyConfig(0.0))
    sid, back, cfg = candidates_from_json(candidates_to_json("s1", cands, NoveltyConfig(0.0)))
    assert sid == "s1" and back == cands and cfg == NoveltyConfig(0.0)
    with pytest.raises(ConfigurationError):
        candidates_from_json('{"format": "x"}')


@st.composite
def records(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))

    def boxes(n):
        xy = rng.uniform(0, 60, (n, 2))
        return np.concatenate([xy, xy + rng.uniform(1, 20, (n, 2))], axis=1)

    known = [tuple(b) for b in boxes(draw(st.integers(0, 3)))]
    bg = [tuple(b) for b in boxes(draw(st.integers(0, 8)))]
    n = draw(st.integers(1, 30))
    return _record(known, bg, boxes(n), rng.random(n))


@settings(max_examples=100, deadline=None)
@given(records(), st.floats(0, 1), st.floats(0, 1))
def test_discovery_invariants(rec, g1, g2):
    lo, hi = sorted((g1, g2))
    out_lo = discover(rec, NoveltyConfig(lo))
    out_hi = discover(rec, NoveltyConfig(hi))
    assert all(c in out_lo for c in out_hi)
    pre_b, pre_s = rec.rpn.pooled_pre_nms()
    for c in out_lo:
        assert c.q > lo and c.support_count >= 1
        assert all(iou(c.box, k.box) == 0 for k in rec.known)
        overlap = [s for b, s in zip(pre_b, pre_s) if iou(c.box, BBox(*b)) > 0]
        assert len(overlap) == c.support_count
        assert 0 <= c.q <= max(overlap) + 1e-12
    assert [c.q for c in out_lo] == sorted((c.q for c in out_lo), reverse=True)
