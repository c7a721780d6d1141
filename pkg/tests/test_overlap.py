import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import curved_xs, vertical_lane
from lanegeom.errors import DegenerateWidthError, NoValidRowsError
from lanegeom.evaluate import mask_iou, rasterize
from lanegeom.geometry import Lane, LanePrior, decode_polyline
from lanegeom.overlap import (
    WidthModel,
    half_widths,
    iou_matrix,
    lane_iou,
    lane_iou_arrays,
    lane_iou_grad,
    pairwise_iou,
)

E = 15.0
W = WidthModel(E, True)


def raster_iou(a, b, grid, width=2 * E):
    res = (int(grid.height), int(grid.width))
    return mask_iou(rasterize(decode_polyline(a, grid), width, res),
                    rasterize(decode_polyline(b, grid), width, res))


def test_identical_lanes(grid):
    a = Lane(curved_xs(np.random.default_rng(1), grid), 5, 60)
    assert lane_iou(a, a, W, grid) == pytest.approx(1.0)
    assert lane_iou(a, a, W, grid, signed=True) == pytest.approx(1.0)


def test_touching_intervals_give_zero(grid):
    assert lane_iou(vertical_lane(grid, 400), vertical_lane(grid, 400 + 2 * E), W, grid) == 0.0


def test_half_offset_is_one_third(grid):
    a, b = vertical_lane(grid, 400), vertical_lane(grid, 400 + E)
    assert lane_iou(a, b, W, grid) == pytest.approx(1 / 3)
    assert raster_iou(a, b, grid) == pytest.approx(1 / 3, abs=0.02)


def test_signed_goes_negative_when_apart(grid):
    a, b = vertical_lane(grid, 400), vertical_lane(grid, 400 + 3 * E)
    # overlap -e per row; the union spans the enclosing hull of 5e
    assert lane_iou(a, b, W, grid, signed=True) == pytest.approx(-1 / 5)
    assert lane_iou(a, b, W, grid) == 0.0


def test_rows_valid_in_one_lane_count_in_union(grid):
    a = vertical_lane(grid, 400)
    b = vertical_lane(grid, 400, start=36)
    assert lane_iou(a, b, W, grid) == pytest.approx(36 / 72)


def test_tilt_widens_rows(grid):
    xs = 400 + 1.0 * (grid.height - grid.rows)   # 45 degrees
    e = half_widths(xs, np.ones(72, bool), W, grid.spacing)
    assert e == pytest.approx(np.full(72, E * np.sqrt(2)))


def test_no_valid_rows_raises(grid):
    with pytest.raises(NoValidRowsError):
        lane_iou_arrays(np.zeros(72), np.zeros(72, bool), np.zeros(72), np.zeros(72, bool),
                        W, grid.spacing)


def test_width_must_be_positive():
    with pytest.raises(DegenerateWidthError):
        WidthModel(0.0)


def test_iou_matrix_identity(grid):
    lane = vertical_lane(grid, 300)
    prior = LanePrior.from_lane(lane, grid)
    assert iou_matrix([prior], [lane], W, grid) == pytest.approx(np.array([[1.0]]))


def test_iou_matrix_disjoint(grid):
    lanes = [vertical_lane(grid, 200), vertical_lane(grid, 200 + 10 * E)]
    m = iou_matrix(lanes, lanes, W, grid)
    assert m[0, 1] == 0.0 and m[1, 0] == 0.0


def test_iou_matrix_flags_disjoint_row_ranges(grid):
    a = vertical_lane(grid, 300, start=0, length=20)
    b = vertical_lane(grid, 300, start=40, length=20)
    m, disjoint = iou_matrix([a], [b], W, grid, return_disjoint=True)
    assert m[0, 0] == 0.0 and disjoint[0, 0]


def test_iou_matrix_matches_entrywise_and_raster(grid):
    rng = np.random.default_rng(42)
    priors = [Lane(curved_xs(rng, grid, slope=0.4), 0, 72) for _ in range(3)]
    gts = [Lane(p.xs + rng.normal(0, 10), 0, 72) for p in priors]
    m = iou_matrix(priors, gts, W, grid)
    for j, p in enumerate(priors):
        for k, g in enumerate(gts):
            assert m[j, k] == pytest.approx(lane_iou(p, g, W, grid), abs=1e-12)
            assert m[j, k] == pytest.approx(raster_iou(p, g, grid), abs=0.02)


def test_iou_matrix_empty(grid):
    assert iou_matrix([], [vertical_lane(grid, 1)], W, grid).shape == (0, 1)


def test_gradient_matches_value(grid):
    rng = np.random.default_rng(3)
    xa = curved_xs(rng, grid)
    xb = xa + 7.0
    va = vb = np.ones(72, bool)
    iou, _ = lane_iou_grad(xa, va, xb, vb, W, grid.spacing)
    assert iou == pytest.approx(lane_iou_arrays(xa, va, xb, vb, W, grid.spacing, signed=True))


def test_gradient_tie_takes_right_derivative(grid):
    # identical lanes: every edge coincides; the rule picks the derivative
    # seen when x increases, which shrinks the overlap
    xs = np.full(72, 400.0)
    va = np.ones(72, bool)
    _, g = lane_iou_grad(xs, va, xs, va, WidthModel(E, False), grid.spacing)
    h = 1e-7
    xp = xs.copy()
    xp[10] += h
    iou_p = lane_iou_arrays(xp, va, xs, va, WidthModel(E, False), grid.spacing, signed=True)
    assert g[10] == pytest.approx((iou_p - 1.0) / h, rel=1e-5)


lane_pairs = st.tuples(st.integers(0, 2 ** 31 - 1), st.floats(-40, 40), st.integers(0, 50),
                       st.integers(0, 50))


def _pair(grid, seed, shift, s1, s2):
    rng = np.random.default_rng(seed)
    xa = curved_xs(rng, grid)
    xb = xa + shift + rng.normal(0, 3, 72)
    va = np.zeros(72, bool)
    vb = np.zeros(72, bool)
    va[s1:] = True
    vb[s2:] = True
    return xa, va, xb, vb


@given(lane_pairs)
def test_symmetry(grid, args):
    xa, va, xb, vb = _pair(grid, *args)
    for signed in (False, True):
        ab = lane_iou_arrays(xa, va, xb, vb, W, grid.spacing, signed)
        ba = lane_iou_arrays(xb, vb, xa, va, W, grid.spacing, signed)
        assert abs(ab - ba) <= 1e-12


@given(lane_pairs)
def test_ranges(grid, args):
    xa, va, xb, vb = _pair(grid, *args)
    u = lane_iou_arrays(xa, va, xb, vb, W, grid.spacing)
    s = lane_iou_arrays(xa, va, xb, vb, W, grid.spacing, signed=True)
    assert 0.0 <= u <= 1.0
    assert -1.0 < s <= 1.0
    assert s <= u + 1e-15


@given(st.integers(0, 2 ** 31 - 1), st.floats(-10, 10))
def test_signed_equals_unsigned_when_every_row_overlaps(grid, seed, shift):
    rng = np.random.default_rng(seed)
    xa = curved_xs(rng, grid, slope=0.2, curve=2e-4)
    xb = xa + shift
    v = np.ones(72, bool)
    u = lane_iou_arrays(xa, v, xb, v, W, grid.spacing)
    s = lane_iou_arrays(xa, v, xb, v, W, grid.spacing, signed=True)
    assert s == pytest.approx(u, abs=1e-12)


@given(lane_pairs, st.floats(1, 30), st.floats(0, 30))
def test_width_monotone(grid, args, e, de):
    seed, shift, s1, _ = args
    xa, va, xb, vb = _pair(grid, seed, shift, s1, s1)
    for tilt in (False, True):
        lo = lane_iou_arrays(xa, va, xb, vb, WidthModel(e, tilt), grid.spacing)
        hi = lane_iou_arrays(xa, va, xb, vb, WidthModel(e + de, tilt), grid.spacing)
        assert hi >= lo - 1e-12


@given(st.floats(0, 800), st.floats(-60, 60), st.integers(0, 60))
def test_tilt_is_noop_on_vertical_lanes(grid, x, shift, start):
    va = np.zeros(72, bool)
    va[start:] = True
    xa, xb = np.full(72, x), np.full(72, x + shift)
    plain = lane_iou_arrays(xa, va, xb, va, WidthModel(E, False), grid.spacing)
    tilt = lane_iou_arrays(xa, va, xb, va, WidthModel(E, True), grid.spacing)
    assert abs(plain - tilt) <= 1e-12


def test_pairwise_matches_single(grid):
    rng = np.random.default_rng(9)
    xa = np.stack([curved_xs(rng, grid) for _ in range(4)])
    va = np.ones((4, 72), bool)
    va[1, :20] = False
    m = pairwise_iou(xa, va, xa, va, W, grid.spacing)
    for i in range(4):
        for j in range(4):
            assert m[i, j] == pytest.approx(
                lane_iou_arrays(xa[i], va[i], xa[j], va[j], W, grid.spacing), abs=1e-12)
