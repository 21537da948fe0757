import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triflow import metrics as Mt
from triflow.selfcheck import loop_metrics


def field(h, w, u, v):
    f = np.zeros((2, h, w))
    f[0], f[1] = u, v
    return f


@pytest.fixture
def pair(rng):
    return rng.normal(size=(2, 8, 8)) * 3, rng.normal(size=(2, 8, 8)) * 30


class TestEPE:
    def test_identical(self, pair):
        assert Mt.epe(pair[1], pair[1]) == 0

    def test_345(self):
        assert Mt.epe(field(4, 5, 3, 4), field(4, 5, 0, 0)) == 5.0

    def test_loop_oracle(self, rng):
        p, g = rng.normal(size=(2, 2, 4, 4))
        assert abs(Mt.epe(p, g) - loop_metrics(p, g)["epe"]) < 1e-6

    def test_mask_excludes(self):
        p = field(2, 2, 0, 0)
        p[0, 0, 0] = 100
        mask = np.ones((2, 2), bool)
        mask[0, 0] = False
        assert Mt.epe(p, field(2, 2, 0, 0), mask) == 0

    def test_buckets_absent_not_zero(self):
        b = Mt.epe_buckets(field(3, 3, 1, 0), field(3, 3, 0, 0))
        assert b["s0-10"] == 1.0 and b["s10-40"] is None and b["s40+"] is None

    def test_bucket_partition(self, rng):
        g = rng.normal(size=(2, 16, 16)) * 30
        valid = rng.random((16, 16)) > 0.2
        masks = Mt._bucket_masks(g, valid)
        assert sum(m.sum() for m in masks.values()) == valid.sum()

    def test_shape_check(self):
        with pytest.raises(ValueError):
            Mt.epe(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


class TestOnePx:
    def test_zero(self, pair):
        assert Mt.onepx(pair[1], pair[1]) == 0

    def test_half(self):
        p = field(2, 4, 0, 0)
        p[0, :, :2] = 2
        assert Mt.onepx(p, field(2, 4, 0, 0)) == 50.0

    def test_exactly_one_is_inlier(self):
        assert Mt.onepx(field(3, 3, 1, 0), field(3, 3, 0, 0)) == 0.0


class TestFl:
    def test_large_gt_not_outlier(self):
        gt = field(1, 1, 100, 0)
        assert Mt.fl_all(field(1, 1, 104, 0), gt) == 0.0

    def test_small_gt_outlier(self):
        gt = field(1, 1, 10, 0)
        assert Mt.fl_all(field(1, 1, 14, 0), gt) == 100.0

    def test_zero_error(self, pair):
        assert Mt.fl_all(pair[1], pair[1]) == 0.0


class TestWAUC:
    def test_perfect(self, pair):
        assert Mt.wauc(pair[1], pair[1]) == pytest.approx(100.0, abs=0.1)

    def test_all_large(self):
        assert Mt.wauc(field(4, 4, 6, 0), field(4, 4, 0, 0)) == 0.0

    def test_all_half_range(self):
        assert Mt.wauc(field(4, 4, 2.5, 0), field(4, 4, 0, 0)) == pytest.approx(25.0, abs=0.1)

    def test_bounded(self, pair):
        assert 0 <= Mt.wauc(*pair) <= 100

    def test_monotone_in_single_pixel(self, rng):
        p, g = rng.normal(size=(2, 2, 6, 6))
        base = Mt.wauc(p, g)
        for _ in range(20):
            q = p.copy()
            y, x = rng.integers(0, 6, size=2)
            direction = (p[:, y, x] - g[:, y, x]) / (np.linalg.norm(p[:, y, x] - g[:, y, x]) + 1e-12)
            q[:, y, x] += direction * rng.uniform(0.1, 3)
            assert Mt.wauc(q, g) <= base + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_all_metrics_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(2, 8, 8)) * 3
    g = rng.normal(size=(2, 8, 8)) * 20
    ref = loop_metrics(p, g)
    assert abs(Mt.epe(p, g) - ref["epe"]) < 1e-6
    assert abs(Mt.onepx(p, g) - ref["1px"]) < 1e-6
    assert abs(Mt.fl_all(p, g) - ref["fl"]) < 1e-6
    assert abs(Mt.wauc(p, g) - ref["wauc"]) < 1e-6


def test_all_metrics_columns(pair):
    row = Mt.all_metrics(*pair)
    assert tuple(row) == Mt.METRIC_COLUMNS


class TestHistogram:
    def test_dims(self):
        assert Mt.HistogramConfig().shape == (2160, 3840)

    def test_constant_single_bin(self):
        h = Mt.motion_histogram([field(5, 7, 3.2, -1.7)])
        (u, v, c), = h.nonzero()
        assert (u, v, c) == (3, -2, 35)
        assert h.clipped == 0 and h.total == 35

    def test_integer_flow_counted_once(self):
        h = Mt.motion_histogram([field(2, 2, 3.0, 4.0)])
        assert h.nonzero() == [(3, 4, 4)]

    def test_empty(self):
        h = Mt.motion_histogram([])
        assert h.counts.sum() == 0 and h.total == 0

    def test_clipping(self):
        f = field(1, 3, 0, 0)
        f[0, 0, 0] = 1080.0  # upper bound is exclusive
        f[1, 0, 1] = -1921.0
        h = Mt.motion_histogram([f])
        assert h.clipped == 2 and h.counts.sum() == 1

    def test_mask(self):
        mask = np.array([[True, False]])
        h = Mt.motion_histogram([field(1, 2, 1, 1)], masks=[mask])
        assert h.total == 1 and h.counts.sum() == 1

    def test_log_display(self):
        h = Mt.motion_histogram([field(2, 2, 0, 0)], Mt.HistogramConfig(4, 4))
        assert h.display()[4, 4] == pytest.approx(np.log(5))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(0, 4), scale=st.sampled_from([1.0, 50.0, 3000.0]))
def test_histogram_conservation(seed, n, scale):
    rng = np.random.default_rng(seed)
    flows = [rng.normal(size=(2, 5, 6)) * scale for _ in range(n)]
    h = Mt.motion_histogram(flows, Mt.HistogramConfig(64, 96))
    assert int(h.counts.sum()) + h.clipped == h.total == 30 * n
