import numpy as np
import pytest

from distill3d import codec, schedule
from distill3d.images import Image


class TestLinearSchedule:
    def test_default_first_alpha_bar(self):
        s = schedule.linear_schedule(1000, 1e-4, 2e-2)
        assert s.alpha_bar(1) == pytest.approx(0.9999, abs=1e-12)

    def test_strictly_decreasing(self):
        s = schedule.linear_schedule()
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] > 0

    def test_rejects_single_step(self):
        with pytest.raises(ValueError):
            schedule.linear_schedule(1)

    def test_rejects_bad_bounds(self):
        for args in [(100, 0.0, 0.1), (100, 0.2, 0.1), (100, 0.1, 1.0)]:
            with pytest.raises(ValueError):
                schedule.linear_schedule(*args)

    def test_t_bounds_default_range(self):
        s = schedule.linear_schedule()
        lo, hi = s.t_bounds()
        assert (lo, hi) == (20, 980)


class TestAddNoise:
    def test_zero_everything(self):
        s = schedule.linear_schedule()
        ts = schedule.TimestepSample(500, np.zeros((3, 4, 4)), 1.0)
        out = schedule.add_noise(np.zeros((3, 4, 4)), ts, s)
        assert not out.any()

    def test_near_identity_at_t1(self):
        s = schedule.linear_schedule()
        z = np.full((1, 2, 2), 2.0)
        ts = schedule.TimestepSample(1, np.zeros((1, 2, 2)), 1.0)
        out = schedule.add_noise(z, ts, s)
        assert np.allclose(out, np.sqrt(0.9999) * 2.0)

    def test_shape_mismatch(self):
        s = schedule.linear_schedule()
        ts = schedule.TimestepSample(10, np.zeros((3, 4, 4)), 1.0)
        with pytest.raises(ValueError):
            schedule.add_noise(np.zeros((3, 2, 2)), ts, s)

    def test_monte_carlo_mean(self):
        # E[z_t] = sqrt(abar_t) z within 3 sigma over 10^4 draws.
        s = schedule.linear_schedule()
        rng = np.random.default_rng(0)
        t = 400
        z = np.array([[[1.5]]])
        n = 10_000
        draws = np.empty(n)
        for i in range(n):
            ts = schedule.TimestepSample(t, rng.standard_normal((1, 1, 1)), 1.0)
            draws[i] = schedule.add_noise(z, ts, s)[0, 0, 0]
        ab = s.alpha_bar(t)
        se = np.sqrt(1.0 - ab) / np.sqrt(n)
        assert abs(draws.mean() - np.sqrt(ab) * 1.5) < 3 * se

    def test_monte_carlo_variance(self):
        s = schedule.linear_schedule()
        rng = np.random.default_rng(1)
        t = 700
        n = 10_000
        draws = np.empty(n)
        for i in range(n):
            ts = schedule.TimestepSample(t, rng.standard_normal((1, 1, 1)), 1.0)
            draws[i] = schedule.add_noise(np.zeros((1, 1, 1)), ts, s)[0, 0, 0]
        ab = s.alpha_bar(t)
        var = draws.var()
        se = (1.0 - ab) * np.sqrt(2.0 / n)  # SE of a Gaussian variance estimate
        assert abs(var - (1.0 - ab)) < 3 * se


class TestTimestepSampling:
    def test_within_bounds_and_weights(self, rng):
        s = schedule.linear_schedule()
        for rule in schedule.WEIGHTING_RULES:
            ts = schedule.sample_timestep(s, (3, 2, 2), rng, weighting=rule)
            assert 20 <= ts.t <= 980
            assert ts.weight > 0

    def test_weight_rules(self):
        s = schedule.linear_schedule()
        ab = s.alpha_bar(300)
        assert schedule.timestep_weight(s, 300, "uniform") == 1.0
        assert schedule.timestep_weight(s, 300, "one_minus_alpha_bar") == pytest.approx(1 - ab)
        assert schedule.timestep_weight(s, 300, "snr") == pytest.approx((1 - ab) / np.sqrt(ab))
        with pytest.raises(ValueError):
            schedule.timestep_weight(s, 300, "nope")


class TestCodec:
    def test_identity_roundtrip_bit_exact(self, rng):
        img = Image(rng.uniform(0, 1, (8, 8, 3)))
        back = codec.decode(codec.encode(img, "identity"))
        assert np.array_equal(back.pixels, img.pixels)

    def test_avgpool_constant(self):
        img = Image.constant(8, 8, (0.4, 0.4, 0.4))
        lat = codec.encode(img, "avgpool-2")
        assert lat.shape == (3, 4, 4)
        assert np.allclose(lat.tensor, 0.4)

    def test_avgpool_right_inverse_on_blocks(self, rng):
        # decode then encode is the identity on the latent side.
        lat = codec.Latent(rng.uniform(0, 1, (3, 4, 4)), "avgpool-2")
        img = codec.decode(lat)
        again = codec.encode(img, "avgpool-2")
        assert np.allclose(again.tensor, lat.tensor, atol=1e-12)

    def test_adjoint_identity(self, rng):
        img = Image(rng.uniform(0, 1, (12, 12, 3)))
        for name in ("identity", "avgpool-2", "avgpool-3"):
            lat = codec.encode(img, name)
            u = rng.normal(size=lat.tensor.shape)
            lhs = float(np.sum(lat.tensor * u))
            rhs = float(np.sum(img.pixels * codec.encode_adjoint(u, name, (12, 12))))
            assert abs(lhs - rhs) < 1e-5

    def test_non_divisible_rejected(self, rng):
        img = Image(rng.uniform(0, 1, (9, 9, 3)))
        with pytest.raises(ValueError):
            codec.encode(img, "avgpool-2")

    def test_unknown_codec(self, rng):
        img = Image(rng.uniform(0, 1, (8, 8, 3)))
        with pytest.raises(ValueError):
            codec.encode(img, "maxpool-2")
