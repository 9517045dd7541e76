import numpy as np
import pytest

from synthrad.rng import Rng


class TestRng:
    def test_same_key_same_stream(self):
        a, b = Rng(3, 1, 2), Rng(3, 1, 2)
        assert a.normal(50).tobytes() == b.normal(50).tobytes()

    def test_different_streams_differ(self):
        assert not np.array_equal(Rng(3, 1).uniform(8), Rng(3, 2).uniform(8))

    def test_child_is_key_extension(self):
        np.testing.assert_array_equal(Rng(5).child(9, 1).uniform(4), Rng(5, 9, 1).uniform(4))

    def test_uniform_uses_top_53_bits(self):
        raw = np.random.PCG64(np.random.SeedSequence([11])).random_raw(5)
        expected = (raw >> np.uint64(11)).astype(np.float64) / 2.0**53
        np.testing.assert_array_equal(Rng(11).uniform(5), expected)

    def test_box_muller_pairs(self):
        u = Rng(4).uniform((2, 3))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        expected = np.empty(6)
        expected[0::2] = r * np.cos(2 * np.pi * u[1])
        expected[1::2] = r * np.sin(2 * np.pi * u[1])
        np.testing.assert_array_equal(Rng(4).normal(6, dtype=np.float64), expected)

    def test_normal_moments(self):
        z = Rng(0).normal(200_000, dtype=np.float64)
        assert abs(z.mean()) < 4 / np.sqrt(z.size)
        assert z.var() == pytest.approx(1.0, abs=0.01)

    @pytest.mark.parametrize("low,high", [(0, 1), (0, 9), (-3, 4), (1, 101)])
    def test_integers_in_range(self, low, high):
        k = Rng(2).integers(low, high, 5000)
        assert k.min() >= low and k.max() < high
        if high - low <= 10:
            assert set(k.tolist()) == set(range(low, high))

    def test_permutation_is_permutation(self):
        p = Rng(8).permutation(100)
        assert sorted(p.tolist()) == list(range(100))

    def test_rejects_negative_key(self):
        with pytest.raises(ValueError):
            Rng(-1)

    def test_empty_range(self):
        with pytest.raises(ValueError):
            Rng(0).integers(3, 3, 1)
