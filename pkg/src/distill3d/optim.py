"""Adam over named numpy parameter arrays, with serializable state.

Parameters are updated in place (so grids keep their storage dtype); the
moment math runs in float64. State round-trips through a flat dict of
arrays, which the pipeline folds into stage checkpoints to keep
resume-and-continue bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float | dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = dict(lr) if isinstance(lr, dict) else {k: float(lr) for k in self.params}
        missing = set(self.params) - set(self.lr)
        if missing:
            raise ValueError(f"no learning rate for parameter groups {sorted(missing)}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in self.params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in self.params.items()}

    def set_lr(self, name: str, lr: float) -> None:
        self.lr[name] = float(lr)

    def scale_lr(self, factor: float) -> None:
        for k in self.lr:
            self.lr[k] *= factor

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            p = self.params[name]
            g = np.asarray(grad, dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr[name] * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"m__{k}"] = self.m[k]
            out[f"v__{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(np.asarray(state["adam_t"]).ravel()[0])
        for k in self.params:
            self.m[k] = np.asarray(state[f"m__{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(state[f"v__{k}"], dtype=np.float64).copy()


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = float(np.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64)**2))
                              for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
