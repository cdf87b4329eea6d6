"""HTTP bridge to external denoisers.

Wire format (bit-exact): tensors travel as
``{"shape": [...], "data_b64": "<base64 little-endian float32, row-major>"}``.
``GET /v1/schedule`` returns ``{"num_steps": N, "betas": [...]}``;
``POST /v1/denoise`` takes the conditioning bundle and returns
``{"eps": <tensor>}``. Transport failures raise ``BridgeTransportError``;
well-connected but malformed exchanges raise ``BridgeProtocolError``.
"""

from __future__ import annotations

import base64

import numpy as np
import requests

from .denoisers import DenoiserCondition
from .errors import BridgeProtocolError, BridgeTransportError
from .schedule import NoiseSchedule

DEFAULT_TIMEOUT = 30.0


def tensor_to_wire(array: np.ndarray) -> dict:
    arr = np.ascontiguousarray(array, dtype="<f4")
    return {"shape": list(arr.shape),
            "data_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def tensor_from_wire(obj, what: str = "tensor") -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data_b64" not in obj:
        raise BridgeProtocolError(f"{what}: expected {{shape, data_b64}}, got {type(obj).__name__}")
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data_b64"], validate=True)
    except Exception as exc:
        raise BridgeProtocolError(f"{what}: undecodable payload ({exc})") from exc
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * count:
        raise BridgeProtocolError(
            f"{what}: payload is {len(raw)} bytes but shape {shape} needs {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def condition_to_wire(kind: str, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> dict:
    body = {
        "kind": kind,
        "t": int(t),
        "latent": tensor_to_wire(z_t),
        "text_embedding": tensor_to_wire(cond.text_embedding),
        "guidance_scale": float(cond.guidance_scale),
    }
    if cond.image_prompt is not None:
        body["image_prompt"] = tensor_to_wire(cond.image_prompt.vector)
    if cond.relative_pose is not None:
        body["relative_pose"] = {
            "R": [float(x) for x in cond.relative_pose.rotation.ravel()],
            "T": [float(x) for x in cond.relative_pose.translation],
        }
    if cond.reference_image is not None:
        body["reference_image"] = tensor_to_wire(cond.reference_image.pixels)
    return body


class RemoteDenoiser:
    """Denoiser living behind a bridge endpoint."""

    def __init__(self, endpoint: str, kind: str = "pretrain",
                 timeout: float = DEFAULT_TIMEOUT, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.kind = kind
        self.timeout = timeout
        self._session = session or requests.Session()

    def predict(self, z_t: np.ndarray, t: int, cond: DenoiserCondition | None = None
                ) -> np.ndarray:
        cond = cond or DenoiserCondition()
        body = condition_to_wire(self.kind, z_t, int(t), cond)
        try:
            resp = self._session.post(f"{self.endpoint}/v1/denoise", json=body,
                                      timeout=self.timeout)
        except requests.RequestException as exc:
            raise BridgeTransportError(f"POST {self.endpoint}/v1/denoise failed: {exc}") from exc
        if resp.status_code != 200:
            detail = _error_detail(resp)
            raise BridgeProtocolError(
                f"denoise rejected with HTTP {resp.status_code}: {detail}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise BridgeProtocolError("denoise response is not JSON") from exc
        if "eps" not in payload:
            raise BridgeProtocolError("denoise response missing 'eps'")
        eps = tensor_from_wire(payload["eps"], "eps")
        if eps.shape != tuple(np.asarray(z_t).shape):
            raise BridgeProtocolError(
                f"eps shape {eps.shape} does not match request latent {np.asarray(z_t).shape}")
        return eps

    def state_hash(self) -> str:
        return f"remote:{self.endpoint}:{self.kind}"


def remote_denoiser(endpoint: str, kind: str = "pretrain",
                    timeout: float = DEFAULT_TIMEOUT) -> RemoteDenoiser:
    return RemoteDenoiser(endpoint, kind, timeout=timeout)


def fetch_remote_schedule(endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> NoiseSchedule:
    url = endpoint.rstrip("/") + "/v1/schedule"
    try:
        resp = requests.get(url, timeout=timeout)
    except requests.RequestException as exc:
        raise BridgeTransportError(f"GET {url} failed: {exc}") from exc
    if resp.status_code != 200:
        raise BridgeProtocolError(f"schedule endpoint returned HTTP {resp.status_code}")
    try:
        payload = resp.json()
        num_steps = int(payload["num_steps"])
        betas = np.asarray(payload["betas"], dtype=np.float64)
    except (ValueError, KeyError, TypeError) as exc:
        raise BridgeProtocolError(f"malformed schedule payload: {exc}") from exc
    if betas.shape != (num_steps,):
        raise BridgeProtocolError(f"schedule has {betas.size} betas but num_steps={num_steps}")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_steps, betas, alpha_bars)


def _error_detail(resp) -> str:
    try:
        payload = resp.json()
        return f"{payload.get('error', '?')}: {payload.get('detail', '')}"
    except ValueError:
        return resp.text[:200]
