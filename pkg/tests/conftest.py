import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_diff(fn, arr: np.ndarray, flat_index: int, eps: float) -> float:
    """Central finite difference of scalar fn() w.r.t. one array entry."""
    orig = arr.ravel()[flat_index]
    arr.ravel()[flat_index] = orig + eps
    fp = fn()
    arr.ravel()[flat_index] = orig - eps
    fm = fn()
    arr.ravel()[flat_index] = orig
    return (fp - fm) / (2.0 * eps)


def fd_check(fn, arr: np.ndarray, grad: np.ndarray, rng, *, eps: float,
             samples: int, rel_tol: float, min_grad: float = 1e-7) -> tuple[int, int, float]:
    """Spot-check an analytic gradient against central differences.

    Samples coordinates with non-negligible analytic gradient; returns
    (failures, tested, worst relative error).
    """
    flat = grad.ravel()
    candidates = np.nonzero(np.abs(flat) > min_grad)[0]
    if candidates.size == 0:
        raise AssertionError("gradient is identically negligible; nothing to check")
    sel = rng.choice(candidates, size=min(samples, candidates.size), replace=False)
    worst = 0.0
    bad = 0
    for idx in sel:
        fd = central_diff(fn, arr, int(idx), eps)
        err = rel_err(flat[idx], fd)
        worst = max(worst, err)
        bad += err > rel_tol
    return bad, len(sel), worst
