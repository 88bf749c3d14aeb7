import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_map
from probslam.errors import InvalidBox
from probslam.probmap import (
    BoundingBox,
    Detection,
    GaussianWeightModel,
    ProbabilityMap,
    box_weight,
    build_map,
    read_pgm,
    render_pgm,
)

MODEL = GaussianWeightModel()
BOX = BoundingBox(320.0, 240.0, 100.0, 80.0)


def test_defaults_are_peak_099_floor_01():
    assert (MODEL.peak, MODEL.floor) == (0.99, 0.1)


def test_center_and_edge_midpoint():
    assert box_weight(MODEL, BOX, (320.0, 240.0)) == 0.99
    assert box_weight(MODEL, BOX, (420.0, 240.0)) == 0.1
    assert box_weight(MODEL, BOX, (320.0, 160.0)) == 0.1


def test_half_way_to_edge_closed_form():
    expected = 0.99 * math.exp(-math.log(9.9) / 4.0)
    assert math.isclose(box_weight(MODEL, BOX, (370.0, 240.0)), expected, rel_tol=1e-12)
    assert abs(expected - 0.558) < 1e-3


def test_covariance_reproduces_the_weight():
    # the quadratic form with the model covariance gives the same value
    S = MODEL.covariance(BOX)
    d = np.array([37.0, -21.0])
    w = 0.99 * math.exp(-0.5 * d @ np.linalg.solve(S, d))
    assert math.isclose(box_weight(MODEL, BOX, (357.0, 219.0)), w, rel_tol=1e-12)


def test_empty_detections_give_floor_everywhere():
    m = build_map([], 640, 480)
    assert m.values.shape == (480, 640)
    assert np.all(m.values == 0.1)


def test_single_box_both_branches():
    m = build_map([Detection("cup", BOX)], 640, 480)
    assert m.at(320, 240) == 0.99
    assert m.at(0, 0) == 0.1


def test_dynamic_detections_ignored():
    m = build_map([Detection("person", BOX, 0.8, is_static=False)], 640, 480)
    assert np.all(m.values == 0.1)


def test_overlap_two_boxes_matches_brute_force():
    boxes = [(20.0, 18.0, 12.0, 9.0), (28.5, 22.0, 10.0, 14.5)]
    dets = [Detection("a", BoundingBox(*b)) for b in boxes]
    m = build_map(dets, 48, 40)
    ref = brute_force_map(boxes, 48, 40)
    assert np.max(np.abs(m.values - ref)) < 1e-12
    inside_both = (24, 20)
    expected = max(box_weight(MODEL, d.box, inside_both) for d in dets)
    assert m.at(*inside_both) == expected


def test_pgm_golden_bytes():
    assert render_pgm(ProbabilityMap.uniform(2, 2)) == b"P5\n2 2\n255\n" + bytes([26] * 4)
    assert render_pgm(ProbabilityMap.uniform(1, 1, 0.99)) == b"P5\n1 1\n255\n" + bytes([252])


def test_pgm_roundtrip_within_quantization():
    m = build_map([Detection("cup", BoundingBox(30.0, 20.0, 15.0, 10.0))], 64, 48)
    back = read_pgm(render_pgm(m))
    assert back.values.shape == m.values.shape
    assert np.max(np.abs(back.values - m.values)) <= 0.5 / 255 + 1e-12


def test_empty_map_not_representable():
    with pytest.raises(ValueError):
        ProbabilityMap(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        build_map([], 0, 0)


def test_invalid_boxes_and_scores():
    with pytest.raises(InvalidBox):
        BoundingBox(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(InvalidBox):
        BoundingBox(1.0, 1.0, 1.0, -2.0)
    with pytest.raises(ValueError):
        Detection("x", BOX, 1.5)


def test_sample_rounds_half_up_and_clamps():
    vals = np.arange(12, dtype=float).reshape(3, 4) / 20.0
    m = ProbabilityMap(vals)
    assert m.sample((-0.4, 1.6)) == vals[2, 0]
    assert m.sample((1.5, 0.5)) == vals[1, 2]
    assert m.sample((99.0, -5.0)) == vals[0, 3]


def test_map_is_read_only():
    m = build_map([], 4, 4)
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0


box_strategy = st.tuples(
    st.floats(-5.0, 70.0), st.floats(-5.0, 70.0), st.floats(0.5, 30.0), st.floats(0.5, 30.0)
)


@settings(max_examples=60, deadline=None)
@given(st.lists(box_strategy, max_size=8), st.integers(1, 40), st.integers(1, 40))
def test_overlap_is_pointwise_max_property(boxes, w, h):
    m = build_map([Detection("o", BoundingBox(*b)) for b in boxes], w, h)
    ref = brute_force_map(boxes, w, h)
    assert np.max(np.abs(m.values - ref)) < 1e-12
    outside = ref == 0.1
    assert np.all(m.values[outside] == 0.1)
    assert np.all((m.values >= 0.1) & (m.values <= 0.99))


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 60.0), st.floats(1.0, 60.0))
def test_monotone_decay_along_axis_rays(hw, hh):
    box = BoundingBox(64.0, 64.0, hw, hh)
    m = build_map([Detection("o", box)], 129, 129)
    v = m.values
    for ray in (v[64, 64:], v[64, 64::-1], v[64:, 64], v[64::-1, 64]):
        assert np.all(np.diff(ray) <= 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 30.0), st.floats(1.0, 30.0), st.integers(0, 3))
def test_centred_box_map_is_symmetric(hw, hh, extra):
    w, h = 41 + 2 * extra, 31 + 2 * extra
    box = BoundingBox((w - 1) / 2.0, (h - 1) / 2.0, hw, hh)
    v = build_map([Detection("o", box)], w, h).values
    assert np.max(np.abs(v - v[:, ::-1])) <= 1e-12
    assert np.max(np.abs(v - v[::-1, :])) <= 1e-12
