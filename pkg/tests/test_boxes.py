import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dmsn.boxes import batched_nms, clip_boxes, decode, encode, iou, iou_matrix, nms
from dmsn.exceptions import PreconditionError


@pytest.mark.oracle
def test_iou_identical_disjoint_and_hand_value():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    # overlap is the unit square, union 4 + 4 - 1
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, rel=1e-12)


def test_iou_degenerate_is_zero():
    assert iou((1, 1, 1, 3), (0, 0, 4, 4)) == 0.0
    assert iou_matrix([[1, 1, 1, 3]], [[0, 0, 4, 4]])[0, 0] == 0.0


box_st = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 20), st.floats(0.5, 20)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_bounded_and_matches_matrix(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert iou_matrix([a], [b])[0, 0] == pytest.approx(v, abs=1e-12)


def test_nms_single_and_duplicate():
    assert nms([[0, 0, 4, 4]], [0.3], 0.5).tolist() == [0]
    assert nms([[0, 0, 4, 4], [0, 0, 4, 4]], [0.2, 0.9], 0.5).tolist() == [1]


def test_nms_tie_break_by_index():
    assert nms([[0, 0, 4, 4], [0, 0, 4, 4]], [0.5, 0.5], 0.5).tolist() == [0]


def test_nms_shape_mismatch():
    with pytest.raises(PreconditionError):
        nms([[0, 0, 1, 1]], [0.1, 0.2], 0.5)


def brute_force_nms(boxes, scores, thr):
    """Search every subset for the one satisfying the greedy fixed-point conditions."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    pos = {i: k for k, i in enumerate(order)}
    ious = [[iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]
    found = []
    for r in range(n + 1):
        for subset in itertools.combinations(range(n), r):
            kept = set(subset)
            ok = True
            for i in range(n):
                # i is suppressed iff some kept box ranked before it overlaps it too much
                blocked = any(pos[j] < pos[i] and ious[i][j] > thr for j in kept)
                if (i in kept) == blocked:
                    ok = False
                    break
            if ok:
                found.append(kept)
    assert len(found) == 1, "greedy suppression has a unique fixed point"
    return found[0]


@pytest.mark.oracle
def test_nms_five_hand_placed_boxes_match_exhaustive_oracle():
    boxes = np.array(
        [
            [0, 0, 10, 10],  # A
            [1, 0, 11, 10],  # B: IoU(A,B)=9/11
            [6, 0, 16, 10],  # C: IoU(A,C)=4/16, IoU(B,C)=5/15
            [12, 0, 22, 10],  # D: IoU(C,D)=4/16
            [30, 30, 34, 34],  # E: isolated
        ],
        dtype=float,
    )
    scores = np.array([0.9, 0.95, 0.8, 0.7, 0.1])
    assert iou(boxes[0], boxes[1]) == pytest.approx(9 / 11)
    assert iou(boxes[1], boxes[2]) == pytest.approx(5 / 15)
    for thr in (0.2, 0.3, 0.5):
        assert set(nms(boxes, scores, thr).tolist()) == brute_force_nms(boxes, scores, thr)
    # B suppresses A at 0.5; the chain C->D survives because B-C is only 1/3
    assert nms(boxes, scores, 0.5).tolist() == [1, 2, 3, 4]
    assert nms(boxes, scores, 0.3).tolist() == [1, 3, 4]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(box_st, st.floats(0, 1)), min_size=1, max_size=7), st.floats(0.1, 0.9))
def test_nms_random_matches_oracle(items, thr):
    boxes = [b for b, _ in items]
    scores = [s for _, s in items]
    assert set(nms(boxes, scores, thr).tolist()) == brute_force_nms(boxes, scores, thr)


def test_batched_nms_is_per_group():
    boxes = [[0, 0, 4, 4], [0, 0, 4, 4], [0, 0, 4, 4]]
    keep = batched_nms(boxes, [0.9, 0.8, 0.7], [0, 1, 0], 0.5)
    assert keep.tolist() == [0, 1]


def test_encode_decode_round_trip():
    g = torch.Generator().manual_seed(0)
    ref = torch.rand(20, 2, generator=g, dtype=torch.float64) * 40
    ref = torch.cat([ref, ref + 4 + torch.rand(20, 2, generator=g, dtype=torch.float64) * 20], dim=1)
    gt = ref + torch.randn(20, 4, generator=g, dtype=torch.float64)
    for w in [(1.0, 1.0, 1.0, 1.0), (10.0, 10.0, 5.0, 5.0)]:
        assert torch.allclose(decode(encode(gt, ref, w), ref, w), gt, atol=1e-9)


def test_clip_boxes_bounds():
    out = clip_boxes(torch.tensor([[-5.0, -2.0, 70.0, 30.0]]), 64, 64)
    assert out.tolist() == [[0.0, 0.0, 64.0, 30.0]]
