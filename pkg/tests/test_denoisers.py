import numpy as np
import pytest

from distill3d import denoisers, prompts, scenes, schedule
from distill3d.camera import CameraPolicy, RelativePose, solve_relative
from distill3d.codec import encode


@pytest.fixture
def sched():
    return schedule.linear_schedule()


class TestDeltaTarget:
    def test_zero_at_scaled_target(self, sched):
        target = np.random.default_rng(0).normal(size=(3, 4, 4))
        den = denoisers.delta_target_denoiser(target, sched)
        t = 300
        z_t = np.sqrt(sched.alpha_bar(t)) * target
        assert np.abs(den.predict(z_t, t)).max() < 1e-12

    def test_zero_input_zero_target(self, sched):
        den = denoisers.delta_target_denoiser(np.zeros((3, 4, 4)), sched)
        assert not den.predict(np.zeros((3, 4, 4)), 77).any()

    def test_closed_form_identity(self, sched, rng):
        # eps_hat - eps = sqrt(abar/(1-abar)) (z - target), exactly per sample.
        for _ in range(50):
            t = int(rng.integers(20, 981))
            z = rng.normal(size=(3, 6, 6))
            target = rng.normal(size=(3, 6, 6))
            ts = schedule.TimestepSample(t, rng.standard_normal((3, 6, 6)), 1.0)
            z_t = schedule.add_noise(z, ts, sched)
            den = denoisers.delta_target_denoiser(target, sched)
            ab = sched.alpha_bar(t)
            expected = np.sqrt(ab / (1.0 - ab)) * (z - target)
            assert np.abs(den.predict(z_t, t) - ts.eps - expected).max() < 1e-6

    def test_worked_example(self):
        # abar = 0.64, z - target = 0.3 -> residual (0.8/0.6)*0.3 = 0.4.
        betas = np.array([0.2, 0.2000001])
        s = schedule.NoiseSchedule(2, betas, np.cumprod(1 - betas))
        assert s.alpha_bar(2) == pytest.approx(0.64, abs=1e-6)
        den = denoisers.delta_target_denoiser(np.zeros((1, 1, 1)), s)
        z = np.full((1, 1, 1), 0.3)
        eps = np.full((1, 1, 1), 0.71)
        z_t = np.sqrt(0.64) * z + np.sqrt(1 - 0.64) * eps
        got = den.predict(z_t, 2) - eps
        assert got[0, 0, 0] == pytest.approx(0.4, abs=1e-6)

    def test_shape_mismatch(self, sched):
        den = denoisers.delta_target_denoiser(np.zeros((3, 4, 4)), sched)
        with pytest.raises(ValueError):
            den.predict(np.zeros((3, 2, 2)), 10)

    def test_rejects_nonfinite_target(self, sched):
        with pytest.raises(ValueError):
            denoisers.delta_target_denoiser(np.array([[[np.inf]]]), sched)


class TestZero123Oracle:
    def make(self, sched, size=16):
        scene = scenes.AnalyticScene(sphere=scenes.SphereSpec(
            radius=0.6, split_axis=2, color_pos=(1, 0, 0), color_neg=(0, 0, 1)))
        policy = CameraPolicy(width=size, height=size)
        default = policy.pose(0.0, 0.0)
        return scene, policy, denoisers.zero123_oracle(scene, default, sched)

    def test_identity_pose_targets_default_view(self, sched):
        scene, policy, oracle = self.make(sched)
        target = oracle.target_for(RelativePose.identity())
        expected = encode(scene.render(policy.pose(0.0, 0.0)), "identity").tensor
        assert np.array_equal(target, expected)

    def test_opposite_azimuth_opposite_color(self, sched):
        scene, policy, oracle = self.make(sched)
        front = oracle.target_for(RelativePose.identity())
        rel = solve_relative(policy.pose(0.0, 0.0), policy.pose(180.0, 0.0))
        back = oracle.target_for(rel)
        # sphere split along z: front view sees red, back view sees blue
        assert front[0, 8, 8] == pytest.approx(1.0, abs=1e-6)
        assert back[2, 8, 8] == pytest.approx(1.0, abs=1e-6)
        assert back[0, 8, 8] == pytest.approx(0.0, abs=1e-6)

    def test_deterministic(self, sched, rng):
        _, policy, oracle = self.make(sched)
        rel = solve_relative(policy.pose(0.0, 0.0), policy.pose(75.0, 20.0))
        cond = denoisers.DenoiserCondition(relative_pose=rel)
        z_t = rng.normal(size=(3, 16, 16))
        a = oracle.predict(z_t, 444, cond)
        b = oracle.predict(z_t, 444, cond)
        assert np.array_equal(a, b)

    def test_missing_relative_pose(self, sched, rng):
        _, _, oracle = self.make(sched)
        with pytest.raises(ValueError):
            oracle.predict(rng.normal(size=(3, 16, 16)), 100, denoisers.DenoiserCondition())


class TestImagePromptOracle:
    def test_constant_gray_embedding(self, sched):
        decoder = prompts.PatchEmbeddingDecoder(4, (3, 16, 16))
        oracle = denoisers.image_prompt_oracle(decoder, sched)
        from distill3d.images import Image
        y = prompts.embed_image(Image.constant(16, 16, (0.5, 0.5, 0.5)), 4)
        cond = denoisers.DenoiserCondition(image_prompt=y)
        t = 500
        target = decoder.decode(y.vector)
        assert np.allclose(target, 0.5)
        z_t = np.sqrt(sched.alpha_bar(t)) * target
        assert np.abs(oracle.predict(z_t, t, cond)).max() < 1e-12

    def test_decoder_linearity_drives_compensation(self, sched, rng):
        # decode(y_rgb + delta) == decode(y_rgb) + decode(delta) exactly.
        decoder = prompts.PatchEmbeddingDecoder(4, (3, 16, 16))
        y = rng.normal(size=48)
        d = rng.normal(size=48)
        lhs = decoder.decode(y + d)
        rhs = decoder.decode(y) + decoder.decode(d)
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_missing_image_prompt(self, sched, rng):
        decoder = prompts.PatchEmbeddingDecoder(4, (3, 16, 16))
        oracle = denoisers.image_prompt_oracle(decoder, sched)
        with pytest.raises(ValueError):
            oracle.predict(rng.normal(size=(3, 16, 16)), 100, denoisers.DenoiserCondition())


class TestCondition:
    def test_guidance_scale_bound(self):
        with pytest.raises(ValueError):
            denoisers.DenoiserCondition(guidance_scale=0.5)

    def test_state_hash_stable(self, sched, rng):
        den = denoisers.delta_target_denoiser(rng.normal(size=(3, 4, 4)), sched)
        h0 = den.state_hash()
        den.predict(rng.normal(size=(3, 4, 4)), 55)
        assert den.state_hash() == h0
