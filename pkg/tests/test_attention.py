import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskradar import gradsuite
from maskradar.attention import (
    WindowAttention, make_grid, make_layout, relative_position_index, swmca, swmsa, window_merge,
    window_partition, wmca, wmsa,
)
from maskradar.numerics import ShapeError


def attn_pair(dim=8, heads=2, window=(2, 4, 4), seed=0, **kw):
    a = WindowAttention(dim, heads, np.random.default_rng(seed), window=window, dtype=np.float64, **kw)
    rng = np.random.default_rng(seed + 100)
    for _, p in a.named_parameters():
        p.value[...] = rng.normal(size=p.value.shape) * 0.5
    return a


def clone(src, **kw):
    dst = WindowAttention(src.dim, src.heads, np.random.default_rng(0), window=src.window, dtype=np.float64, **kw)
    mine = dict(dst.named_parameters())
    for name, p in src.named_parameters():
        if name in mine:
            mine[name].value[...] = p.value
    return dst


class TestGrid:
    def test_even_split(self):
        g = make_grid((4, 8, 8))
        assert g.N == 4 and g.P == 64

    def test_window_equals_volume(self):
        g = make_grid((4, 4, 4))
        assert g.N == 1 and g.P == 64

    def test_padding_and_mask(self):
        g = make_grid((4, 6, 6))
        assert g.padded == (4, 8, 8) and g.N == 4
        _, valid = window_partition(np.ones((4, 6, 6, 1)), g)
        assert valid.sum() == 4 * 6 * 6
        assert (~valid).sum() == 4 * 64 - 144

    def test_small_axes_clamped_without_shift(self):
        g = make_grid((1, 8, 8), (4, 4, 4), (2, 2, 2))
        assert g.window == (1, 4, 4) and g.shift == (0, 2, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 3),
           st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)))
    def test_merge_inverts_partition(self, t, h, w, c, shift):
        x = np.random.default_rng(t * 100 + h * 10 + w).normal(size=(t, h, w, c))
        g = make_grid((t, h, w), (4, 4, 4), shift)
        windows, valid = window_partition(x, g)
        assert not windows[~valid].any()
        assert window_merge(windows, g).tobytes() == x.tobytes()

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            window_partition(np.zeros((2, 4, 4, 1)), make_grid((2, 4, 8)))

    def test_relative_index_range(self):
        idx = relative_position_index((4, 4, 4), (4, 4, 4))
        assert idx.min() == 0 and idx.max() == 7 ** 3 - 1
        assert np.all(np.diag(idx) == idx[0, 0])


def _windows_of(coords, g):
    from maskradar.attention import _to_windows
    return np.stack([_to_windows(coords[:, a].reshape(g.padded), g) for a in range(3)], -1)


class TestMask:
    def test_regions_on_flat_volume(self):
        """1x8x8 with a half-window displacement: the corner window mixes four regions."""
        g = make_grid((1, 8, 8), (4, 4, 4), (2, 2, 2))
        lay = make_layout(g)
        allowed = lay.allowed
        last = g.N - 1
        assert len(np.unique(lay.region[last])) == 4
        for i in range(g.P):
            for j in range(g.P):
                assert allowed[last, i, j] == (lay.region[last, i] == lay.region[last, j])
        assert allowed[0].all()

    @pytest.mark.parametrize("extents", [(1, 8, 8), (4, 8, 8), (2, 6, 10)])
    def test_mask_matches_adjacency_oracle(self, extents):
        """Two tokens may attend iff their in-window offset equals their true offset on every axis."""
        g = make_grid(extents, (2, 4, 4), (1, 2, 2))
        lay = make_layout(g)
        coords = np.stack(np.unravel_index(np.arange(np.prod(g.padded)), g.padded), -1)
        # shifted position p holds original cell (p + shift) mod padded
        orig = (coords + np.array(g.shift)) % np.array(g.padded)
        pos_w = _windows_of(coords, g)
        orig_w = _windows_of(orig, g)
        for n in range(g.N):
            dp = pos_w[n][:, None] - pos_w[n][None]
            do = orig_w[n][:, None] - orig_w[n][None]
            expect = np.all(dp == do, axis=-1)
            v = lay.valid[n]
            assert np.array_equal(lay.allowed[n][np.ix_(v, v)], expect[np.ix_(v, v)])

    def test_cross_region_weights_are_zero(self):
        a = attn_pair(window=(4, 4, 4), shifted=True)
        x = np.random.default_rng(3).normal(size=(1, 8, 8, 8))
        a(x)
        lay = make_layout(a.grid_for((1, 8, 8)))
        w = a.last_weights
        blocked = ~lay.allowed[:, None].repeat(a.heads, axis=1)
        assert np.all(w[blocked] == 0)

    def test_pad_keys_get_zero_weight(self):
        a = attn_pair()
        a(np.random.default_rng(1).normal(size=(3, 6, 5, 8)))
        lay = make_layout(a.grid_for((3, 6, 5)))
        w = a.last_weights
        assert np.all(w[np.broadcast_to(~lay.valid[:, None, None, :], w.shape)] == 0)


class TestAttention:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("shape", [(4, 8, 8), (3, 6, 5), (2, 4, 12)])
    @pytest.mark.parametrize("shifted", [False, True])
    def test_rows_stochastic(self, seed, shape, shifted):
        a = attn_pair(seed=seed, shifted=shifted)
        a(np.random.default_rng(seed).normal(size=shape + (8,)))
        lay = make_layout(a.grid_for(shape))
        sums = a.last_weights.sum(axis=-1)
        valid_rows = np.broadcast_to(lay.valid[:, None, :], sums.shape)
        np.testing.assert_allclose(sums[valid_rows], 1.0, atol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_window_locality(self, seed):
        a = attn_pair(seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 8, 8, 8))
        y0 = a(x)[0]
        x2 = x.copy()
        x2[0, 1, 1] += rng.normal(size=8)  # window (0, 0, 0)
        y1 = a(x2)[0]
        assert np.array_equal(y0[:, 4:], y1[:, 4:]) and np.array_equal(y0[:, :, 4:], y1[:, :, 4:])
        assert not np.array_equal(y0[:, :4, :4], y1[:, :4, :4])

    @pytest.mark.parametrize("seed", range(3))
    def test_zero_shift_equals_wmsa(self, seed):
        a = attn_pair(seed=seed)
        b = clone(a, shifted=True, shift=(0, 0, 0))
        x = np.random.default_rng(seed).normal(size=(4, 8, 8, 8))
        assert a(x)[0].tobytes() == b(x)[0].tobytes()

    def test_single_token_window_is_value_projection(self):
        a = attn_pair(window=(1, 1, 1))
        a.proj.weight.value[...] = np.eye(8)
        a.proj.bias.value[...] = 0
        x = np.random.default_rng(2).normal(size=(2, 3, 3, 8))
        y, _, v = a(x)
        np.testing.assert_allclose(y, v, atol=1e-12)

    def test_exports_raw_projections(self):
        a = attn_pair()
        x = np.random.default_rng(4).normal(size=(2, 4, 4, 8))
        _, k, v = a(x)
        np.testing.assert_allclose(k, a.k(x))
        np.testing.assert_allclose(v, a.v(x))

    def test_head_mismatch(self):
        with pytest.raises(ShapeError):
            WindowAttention(10, 3, np.random.default_rng(0))

    def test_factories(self):
        rng = np.random.default_rng(0)
        assert not wmsa(8, 2, rng).cross and wmsa(8, 2, rng).shift == (0, 0, 0)
        assert swmsa(8, 2, rng).shift == (2, 2, 2)
        assert wmca(8, 2, rng).cross and swmca(8, 2, rng).cross


class TestCrossAttention:
    def test_self_degenerate_case(self):
        a = attn_pair()
        c = clone(a, cross=True)
        x = np.random.default_rng(5).normal(size=(4, 8, 8, 8))
        y, k, v = a(x)
        np.testing.assert_allclose(c(x, k, v)[0], y, atol=1e-12)

    def test_single_token_windows_return_values(self):
        c = attn_pair(window=(1, 1, 1), cross=True)
        c.proj.weight.value[...] = np.eye(8)
        c.proj.bias.value[...] = 0
        rng = np.random.default_rng(6)
        x, k, v = (rng.normal(size=(2, 2, 2, 8)) for _ in range(3))
        np.testing.assert_allclose(c(x, k, v)[0], v, atol=1e-12)

    def test_zero_shift_equals_wmca(self):
        c = attn_pair(cross=True)
        s = clone(c, cross=True, shifted=True, shift=(0, 0, 0))
        rng = np.random.default_rng(7)
        x, k, v = (rng.normal(size=(4, 8, 8, 8)) for _ in range(3))
        assert c(x, k, v)[0].tobytes() == s(x, k, v)[0].tobytes()

    def test_shifted_cross_mask(self):
        c = attn_pair(window=(4, 4, 4), cross=True, shifted=True)
        rng = np.random.default_rng(8)
        x, k, v = (rng.normal(size=(1, 8, 8, 8)) for _ in range(3))
        c(x, k, v)
        lay = make_layout(c.grid_for((1, 8, 8)))
        assert np.all(c.last_weights[~lay.allowed[:, None].repeat(2, axis=1)] == 0)

    def test_locality(self):
        c = attn_pair(cross=True, shifted=True)
        rng = np.random.default_rng(9)
        x, k, v = (rng.normal(size=(2, 8, 8, 8)) for _ in range(3))
        y0 = c(x, k, v)[0]
        v2 = v.copy()
        v2[0, 4, 4] += 1.0  # inside the middle shifted window only
        y1 = c(x, k, v2)[0]
        changed = np.argwhere(np.any(y0 != y1, axis=-1))
        assert changed[:, 1].min() >= 2 and changed[:, 1].max() <= 5

    def test_resolution_mismatch(self):
        c = attn_pair(cross=True)
        with pytest.raises(ShapeError, match="do not match"):
            c(np.zeros((2, 4, 4, 8)), np.zeros((2, 8, 8, 8)), np.zeros((2, 8, 8, 8)))

    def test_missing_kv(self):
        with pytest.raises(ValueError):
            attn_pair(cross=True)(np.zeros((2, 4, 4, 8)))


@pytest.mark.parametrize("name", ["wmsa", "swmsa", "wmca", "swmca"])
def test_gradients(name):
    report = gradsuite.BLOCKS[name]()
    assert report.passed, (report.worst, report.max_error)
