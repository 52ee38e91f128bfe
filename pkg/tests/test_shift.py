import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskradar.numerics import ShapeError
from maskradar.opcount import count_ops, counting_array, to_float
from maskradar.shift import (
    CANONICAL_CELLS, ChannelShiftSpec, ShiftPattern, channel_shift, channel_shift_adjoint, make_pattern,
    patch_shift, patch_shift_back,
)


def brute_patch_shift(x, cell):
    t, h, w = x.shape[:3]
    k = len(cell)
    out = np.empty_like(x)
    for i in range(t):
        for j in range(h):
            for m in range(w):
                out[i, j, m] = x[(i + cell[j % k][m % k]) % t, j, m]
    return out


@pytest.fixture
def tiny():
    return np.arange(3 * 2 * 2 * 1, dtype=np.float64).reshape(3, 2, 2, 1)


class TestPatterns:
    def test_pattern_c_field(self):
        p = make_pattern("C")
        assert sum(len(r) for r in p.cell) == 9
        assert p.offsets == set(range(-4, 5)) and p.temporal_field == 9

    def test_pattern_a_within_three_frames(self):
        assert make_pattern("A").offsets <= {-1, 0, 1}
        assert make_pattern("A").temporal_field == 3

    def test_pattern_b_spans_four(self):
        assert make_pattern("B").temporal_field == 4

    @pytest.mark.parametrize("name", sorted(CANONICAL_CELLS))
    def test_canonical_keeps_current_frame(self, name):
        assert 0 in make_pattern(name).offsets

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown shift pattern"):
            make_pattern("D")

    @pytest.mark.parametrize("cell", [((1, 2), (3, 4)), ((0, 1),), ()])
    def test_invalid_cells(self, cell):
        with pytest.raises(ValueError):
            ShiftPattern(cell)

    def test_tile_truncates_at_border(self):
        tile = make_pattern("C").tile(4, 5)
        assert tile[3, 4] == make_pattern("C").cell[0][1]


class TestPatchShift:
    def test_hand_mapped_case(self, tiny):
        p = ShiftPattern(((-1, 0), (0, 1)))
        out = patch_shift(tiny, p)
        assert out[1, 0, 0, 0] == tiny[0, 0, 0, 0]
        assert out[1, 1, 1, 0] == tiny[2, 1, 1, 0]
        assert out[1, 0, 1, 0] == tiny[1, 0, 1, 0]
        np.testing.assert_array_equal(patch_shift_back(out, p), tiny)

    def test_zero_pattern_identity(self, rng):
        x = rng.normal(size=(4, 5, 6, 2))
        p = ShiftPattern(((0, 0), (0, 0)))
        np.testing.assert_array_equal(patch_shift(x, p), x)
        np.testing.assert_array_equal(patch_shift_back(x, p), x)

    @pytest.mark.parametrize("name", ["A", "B", "C"])
    def test_single_frame_identity(self, rng, name):
        x = rng.normal(size=(1, 7, 7, 3))
        np.testing.assert_array_equal(patch_shift(x, make_pattern(name)), x)

    @pytest.mark.parametrize("name", ["A", "B", "C"])
    def test_matches_brute_force(self, rng, name):
        x = rng.normal(size=(5, 7, 8, 2))
        np.testing.assert_array_equal(patch_shift(x, make_pattern(name)), brute_patch_shift(x, CANONICAL_CELLS[name]))

    def test_channels_move_together(self, rng):
        x = rng.normal(size=(6, 4, 4, 5))
        out = patch_shift(x, make_pattern("C"))
        for c in range(5):
            np.testing.assert_array_equal(out[..., c], patch_shift(x[..., c:c + 1], make_pattern("C"))[..., 0])

    def test_empty_volume(self):
        with pytest.raises(ShapeError):
            patch_shift(np.zeros((0, 3, 3, 1)), make_pattern("A"))

    def test_output_is_fresh(self, rng):
        x = rng.normal(size=(3, 3, 3, 1))
        assert not np.shares_memory(patch_shift(x, make_pattern("A")), x)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 7), st.integers(1, 3),
           st.sampled_from(["A", "B", "C"]), st.integers(0, 2**31 - 1))
    def test_roundtrip_and_multiset(self, t, h, w, c, name, seed):
        x = np.random.default_rng(seed).normal(size=(t, h, w, c))
        p = make_pattern(name)
        y = patch_shift(x, p)
        assert patch_shift_back(y, p).tobytes() == x.tobytes()
        assert np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))

    def test_no_arithmetic(self, rng):
        x = counting_array(rng.normal(size=(4, 5, 5, 2)))
        with count_ops() as ops:
            y = patch_shift(x, make_pattern("C"))
            z = patch_shift_back(y, make_pattern("C"))
        assert ops.total == 0
        np.testing.assert_array_equal(to_float(z), to_float(x))


class TestChannelShift:
    def test_ratio_zero_identity(self, rng):
        x = rng.normal(size=(3, 2, 2, 8))
        np.testing.assert_array_equal(channel_shift(x, ChannelShiftSpec(0.0)), x)

    def test_hand_mapped_case(self, rng):
        x = rng.normal(size=(2, 1, 1, 8))
        out = channel_shift(x)
        assert out[1, 0, 0, 0] == x[0, 0, 0, 0]
        assert out[0, 0, 0, 0] == 0
        assert out[0, 0, 0, 1] == x[1, 0, 0, 1]
        assert out[1, 0, 0, 1] == 0

    @pytest.mark.parametrize("c,expected", [(8, 1), (32, 4), (7, 0), (4, 0), (16, 2)])
    def test_fold(self, c, expected):
        assert ChannelShiftSpec(0.25).fold(c) == expected

    def test_rest_unchanged(self, rng):
        x = rng.normal(size=(4, 3, 3, 32))
        np.testing.assert_array_equal(channel_shift(x)[..., 8:], x[..., 8:])

    def test_removes_mass_only(self, rng):
        x = rng.random((5, 3, 3, 16))
        assert channel_shift(x).sum() <= x.sum()

    def test_adjoint(self, rng):
        x = rng.normal(size=(5, 2, 3, 16))
        dy = rng.normal(size=x.shape)
        assert np.sum(channel_shift(x) * dy) == pytest.approx(np.sum(x * channel_shift_adjoint(dy)))

    def test_no_arithmetic(self, rng):
        x = counting_array(rng.normal(size=(3, 2, 2, 8)))
        with count_ops() as ops:
            channel_shift(x)
        assert ops.total == 0

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            ChannelShiftSpec(1.5)


def test_counter_sees_arithmetic():
    x = counting_array([1.0, 2.0])
    with count_ops() as ops:
        x + x
    assert ops.adds == 2
