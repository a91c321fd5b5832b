import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import iou, nms_sequential_keep, runs_naive
from pipeloc.datamodel import Interval
from pipeloc.errors import ConfigError
from pipeloc.postprocess import PostConfig, frame_runs, localize, nms, scores_to_intervals, temporal_iou


def test_single_run_example():
    out = scores_to_intervals([0, 1, 1, 0], 1.0, PostConfig(thresholds=[0.5], min_len_frames=2))
    assert out == [Interval(1.0, 3.0, 1.0)]


def test_all_zero_scores():
    assert scores_to_intervals(np.zeros(30), 3.0, PostConfig()) == []
    assert localize(np.zeros(30), 3.0, PostConfig()) == []


def test_gap_bridging_and_min_len():
    above = np.array([1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 1], bool)
    assert frame_runs(above, merge_gap=1, min_len=1) == [(0, 3), (6, 10)]
    assert frame_runs(above, merge_gap=0, min_len=2) == [(0, 1), (8, 10)]


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=50),
    st.integers(0, 3),
    st.integers(1, 4),
    st.sampled_from([1.0, 3.0, 25.0]),
)
def test_candidates_match_scanner_oracle(scores, gap, min_len, fps):
    cfg = PostConfig(merge_gap_frames=gap, min_len_frames=min_len)
    got = scores_to_intervals(scores, fps, cfg)
    s = np.asarray(scores, dtype=np.float64)
    expect = [
        (a / fps, (b + 1) / fps, float(s[a : b + 1].mean()))
        for th in cfg.thresholds
        for a, b in runs_naive(scores, th, gap, min_len)
    ]
    assert len(got) == len(expect)
    for iv, (a, b, sc) in zip(got, expect):
        assert (iv.start, iv.end) == (a, b) and iv.score == pytest.approx(sc, rel=1e-12)
    # within one threshold, runs never overlap
    for th in cfg.thresholds:
        runs = frame_runs(s >= th, gap, min_len)
        assert all(b0 < a1 for (_, b0), (a1, _) in zip(runs, runs[1:]))


def test_iou_values():
    a = Interval(0.0, 10.0)
    assert temporal_iou(a, a) == 1.0
    assert temporal_iou(a, Interval(10.0, 12.0)) == 0.0
    assert temporal_iou(a, Interval(5.0, 15.0)) == pytest.approx(1 / 3)


@given(st.floats(0, 50), st.floats(0.01, 20), st.floats(0, 50), st.floats(0.01, 20))
def test_iou_symmetric_and_bounded(s0, l0, s1, l1):
    a, b = Interval(s0, s0 + l0), Interval(s1, s1 + l1)
    v = temporal_iou(a, b)
    assert v == temporal_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou((a.start, a.end), (b.start, b.end)), abs=1e-12)
    if v == 1.0:
        assert (a.start, a.end) == pytest.approx((b.start, b.end))


def test_nms_identical_keeps_higher():
    out = nms([Interval(1, 4, 0.7), Interval(1, 4, 0.9)], 0.5)
    assert out == [Interval(1, 4, 0.9)]


def test_nms_disjoint_unchanged_in_score_order():
    cands = [Interval(0, 1, 0.2), Interval(2, 3, 0.8), Interval(5, 6, 0.5)]
    assert nms(cands, 0.5) == [cands[1], cands[2], cands[0]]


def test_nms_tie_break():
    a, b, c = Interval(2, 5, 0.5), Interval(0, 3, 0.5), Interval(0, 2, 0.5)
    # equal scores: earlier start first, then shorter
    assert nms([a, b, c], 1.0) == [c, b, a]


_iv = st.builds(
    lambda s, l, sc: Interval(s, s + l, sc),
    st.integers(0, 20).map(float),
    st.integers(1, 8).map(float),
    st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]),
)


@given(st.lists(_iv, max_size=10), st.sampled_from([0.1, 0.3, 0.5, 0.7, 1.0]))
def test_nms_matches_greedy_oracle(cands, thr):
    out = nms(cands, thr)
    expect = nms_sequential_keep([(c.start, c.end, c.score) for c in cands], thr)
    assert [(c.start, c.end, c.score) for c in out] == expect
    assert all(c in cands for c in out)
    for i, a in enumerate(out):
        for b in out[i + 1 :]:
            assert temporal_iou(a, b) <= thr


@pytest.mark.parametrize(
    "bad",
    [dict(thresholds=[0.5, 0.7]), dict(thresholds=[]), dict(thresholds=[1.0]), dict(nms_iou=0.0),
     dict(min_len_frames=0)],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PostConfig(**bad).validate()
