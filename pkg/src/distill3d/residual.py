"""Trainable residual score model: a tiny MLP added on top of a frozen base
denoiser, trained with the denoising MSE on fresh (t, noise) draws.

The final layer is zero-initialized, so at initialization the model's
prediction equals the base prediction exactly; the residual only ever
changes through :func:`train_residual_step`.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .denoisers import DenoiserCondition
from .optim import Adam
from .schedule import NoiseSchedule, add_noise, sample_timestep

DEFAULT_HIDDEN = 128
T_EMBED_DIM = 16
CAM_EMBED_DIM = 6


def sinusoidal_embedding(t: int, num_steps: int, dim: int = T_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    phase = (t / num_steps) * 1000.0 * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)])


def camera_embedding(cond: DenoiserCondition) -> np.ndarray:
    if cond is None or cond.camera is None:
        return np.zeros(CAM_EMBED_DIM)
    cam = cond.camera
    pos = cam.position
    scale = max(1.0, float(np.linalg.norm(pos)))
    return np.concatenate([pos / scale, cam.forward])


class ResidualScoreModel:
    """base(z_t; y, t) + MLP(flat z_t, t-embedding, camera embedding)."""

    def __init__(self, base, latent_shape: tuple[int, int, int],
                 schedule: NoiseSchedule, hidden: int = DEFAULT_HIDDEN,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.base = base
        self.latent_shape = tuple(latent_shape)
        self.schedule = schedule
        d_out = int(np.prod(latent_shape))
        d_in = d_out + T_EMBED_DIM + CAM_EMBED_DIM
        self.phi = {
            "w1": rng.normal(0.0, 1.0 / np.sqrt(d_in), (hidden, d_in)),
            "b1": np.zeros(hidden),
            "w2": np.zeros((d_out, hidden)),   # zero init: residual starts at exactly 0
            "b2": np.zeros(d_out),
        }
        self._opt: Adam | None = None

    def features(self, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> np.ndarray:
        return np.concatenate([
            np.asarray(z_t, dtype=np.float64).ravel(),
            sinusoidal_embedding(t, self.schedule.num_steps),
            camera_embedding(cond),
        ])

    def residual(self, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> np.ndarray:
        f = self.features(z_t, t, cond)
        h = np.tanh(self.phi["w1"] @ f + self.phi["b1"])
        return (self.phi["w2"] @ h + self.phi["b2"]).reshape(self.latent_shape)

    def predict(self, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> np.ndarray:
        return self.base.predict(z_t, t, cond) + self.residual(z_t, t, cond)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.phi):
            h.update(self.phi[k].tobytes())
        return h.hexdigest()

    def _optimizer(self, lr: float) -> Adam:
        if self._opt is None:
            self._opt = Adam(self.phi, lr)
        for k in self.phi:
            self._opt.set_lr(k, lr)
        return self._opt


def train_residual_step(model: ResidualScoreModel, render_latent: np.ndarray,
                        cond: DenoiserCondition, schedule: NoiseSchedule,
                        rng: np.random.Generator, lr: float = 1e-3,
                        t_range: tuple[float, float] = (0.02, 0.98)) -> float:
    """One SGD step on mean((model(z_t) - eps)^2) with a fresh (t, eps) draw.

    Returns the pre-step loss. The base denoiser is frozen; only the MLP
    parameters move.
    """
    z = np.asarray(render_latent, dtype=np.float64)
    ts = sample_timestep(schedule, z.shape, rng, t_range=t_range)
    z_t = add_noise(z, ts, schedule)

    base_eps = model.base.predict(z_t, ts.t, cond)
    f = model.features(z_t, ts.t, cond)
    h_pre = model.phi["w1"] @ f + model.phi["b1"]
    h = np.tanh(h_pre)
    r = model.phi["w2"] @ h + model.phi["b2"]
    pred = base_eps.ravel() + r
    err = pred - ts.eps.ravel()
    loss = float(np.mean(err * err))

    d_r = 2.0 * err / err.size
    d_w2 = np.outer(d_r, h)
    d_b2 = d_r
    d_h = model.phi["w2"].T @ d_r
    d_pre = d_h * (1.0 - h * h)
    d_w1 = np.outer(d_pre, f)
    d_b1 = d_pre

    model._optimizer(lr).step({"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2})
    return loss
