"""Wire-level helpers for the denoiser bridge protocol.

Tensors travel as ``{"shape": [...], "data_b64": base64(little-endian
float32, row-major)}``. Every validation failure maps to a structured
error with a short machine-readable code, surfaced as HTTP 400.
"""

from __future__ import annotations

import base64

import numpy as np

KNOWN_KINDS = ("pretrain", "zero123", "image_prompt")


class RequestError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


def tensor_to_wire(array: np.ndarray) -> dict:
    arr = np.ascontiguousarray(array, dtype="<f4")
    return {"shape": list(arr.shape),
            "data_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def tensor_from_wire(obj, what: str, rank: int | None = None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise RequestError("bad_payload", f"{what} must be an object")
    if "shape" not in obj or "data_b64" not in obj:
        raise RequestError("missing_field", f"{what} needs 'shape' and 'data_b64'")
    try:
        shape = tuple(int(s) for s in obj["shape"])
    except (TypeError, ValueError):
        raise RequestError("bad_shape", f"{what}.shape must be a list of integers")
    if any(s <= 0 for s in shape):
        raise RequestError("bad_shape", f"{what}.shape entries must be positive")
    if rank is not None and len(shape) != rank:
        raise RequestError("bad_shape",
                           f"{what} must have rank {rank}, got shape {list(shape)}")
    try:
        raw = base64.b64decode(obj["data_b64"], validate=True)
    except Exception:
        raise RequestError("bad_payload", f"{what}.data_b64 is not valid base64")
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise RequestError("bad_payload",
                           f"{what} carries {len(raw)} bytes, shape needs {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise RequestError("bad_payload", f"{what} contains non-finite values")
    return arr


def parse_denoise_request(body: dict, num_steps: int) -> dict:
    """Validate and decode a /v1/denoise body into numpy-land."""
    if not isinstance(body, dict):
        raise RequestError("bad_json", "request body must be a JSON object")
    kind = body.get("kind")
    if kind not in KNOWN_KINDS:
        raise RequestError("bad_kind", f"kind must be one of {list(KNOWN_KINDS)}")
    if "t" not in body:
        raise RequestError("missing_field", "request needs 't'")
    try:
        t = int(body["t"])
    except (TypeError, ValueError):
        raise RequestError("bad_timestep", "'t' must be an integer")
    if not 1 <= t <= num_steps:
        raise RequestError("bad_timestep", f"t={t} outside [1, {num_steps}]")
    if "latent" not in body:
        raise RequestError("missing_field", "request needs 'latent'")
    latent = tensor_from_wire(body["latent"], "latent", rank=3)

    out = {"kind": kind, "t": t, "latent": latent}
    if "text_embedding" in body:
        out["text_embedding"] = tensor_from_wire(body["text_embedding"], "text_embedding")
    if "image_prompt" in body:
        out["image_prompt"] = tensor_from_wire(body["image_prompt"], "image_prompt")
    if "reference_image" in body:
        out["reference_image"] = tensor_from_wire(body["reference_image"], "reference_image")
    if "relative_pose" in body:
        pose = body["relative_pose"]
        if not isinstance(pose, dict) or "R" not in pose or "T" not in pose:
            raise RequestError("bad_pose", "relative_pose needs 'R' (9 reals) and 'T' (3 reals)")
        r = np.asarray(pose["R"], dtype=np.float64)
        tvec = np.asarray(pose["T"], dtype=np.float64)
        if r.shape != (9,) or tvec.shape != (3,):
            raise RequestError("bad_pose", "relative_pose must carry 9 + 3 reals")
        out["relative_pose"] = (r.reshape(3, 3), tvec)
    if "guidance_scale" in body:
        try:
            out["guidance_scale"] = float(body["guidance_scale"])
        except (TypeError, ValueError):
            raise RequestError("bad_payload", "guidance_scale must be a number")
    return out
