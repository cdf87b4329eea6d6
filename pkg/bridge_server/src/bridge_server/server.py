"""Reference bridge server: schedule endpoint plus a delta-target oracle.

The hosted denoiser is the exact conditional denoiser of a point mass:
eps_hat = (z_t - sqrt(abar_t) * target) / sqrt(1 - abar_t). A custom
``adapter`` callable can replace it to mount a real model behind the same
wire format. Request handling is stateless; identical requests produce
identical responses.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .protocol import RequestError, parse_denoise_request, tensor_to_wire


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8800
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    target_path: str | None = None   # .npy tensor; None hosts a zero target

    def __post_init__(self):
        if not 0 <= self.port < 65536:  # 0 = OS-assigned, used by tests
            raise ValueError(f"invalid port {self.port}")
        if self.num_steps < 2 or not (0 < self.beta_start < self.beta_end < 1):
            raise ValueError("invalid schedule parameters")


def linear_betas(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    return np.linspace(beta_start, beta_end, num_steps)


class DeltaOracle:
    """Point-mass denoiser toward a fixed target (or zeros of request shape)."""

    def __init__(self, config: ServerConfig):
        betas = linear_betas(config.num_steps, config.beta_start, config.beta_end)
        self.alpha_bars = np.cumprod(1.0 - betas)
        self.target = None
        if config.target_path is not None:
            self.target = np.load(config.target_path).astype(np.float64)
            if self.target.ndim != 3:
                raise ValueError(f"target tensor must be rank 3, got {self.target.shape}")

    def __call__(self, request: dict) -> np.ndarray:
        z_t = request["latent"]
        target = self.target
        if target is None:
            target = np.zeros(z_t.shape)
        elif z_t.shape != target.shape:
            raise RequestError(
                "bad_shape",
                f"latent shape {list(z_t.shape)} != hosted target {list(target.shape)}")
        ab = self.alpha_bars[request["t"] - 1]
        return (z_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


def make_handler(config: ServerConfig, adapter=None):
    betas = linear_betas(config.num_steps, config.beta_start, config.beta_end)
    schedule_payload = json.dumps({"num_steps": config.num_steps,
                                   "betas": betas.tolist()}).encode()
    denoise = adapter if adapter is not None else DeltaOracle(config)

    class Handler(BaseHTTPRequestHandler):
        server_version = "denoiser-bridge/0.1"

        def log_message(self, *args):
            pass

        def _reply(self, code: int, payload: bytes, ctype="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _error(self, code: str, detail: str, status: int = 400):
            self._reply(status, json.dumps({"error": code, "detail": detail}).encode())

        def do_GET(self):
            if self.path == "/v1/schedule":
                self._reply(200, schedule_payload)
            else:
                self._error("not_found", f"unknown path {self.path}", status=404)

        def do_POST(self):
            if self.path != "/v1/denoise":
                self._error("not_found", f"unknown path {self.path}", status=404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise RequestError("bad_json", f"body is not valid JSON ({exc})")
                request = parse_denoise_request(body, config.num_steps)
                eps = denoise(request)
                if eps.shape != request["latent"].shape:
                    raise RequestError("bad_shape", "adapter returned a mismatched shape")
                self._reply(200, json.dumps({"eps": tensor_to_wire(eps)}).encode())
            except RequestError as exc:
                self._error(exc.code, exc.detail)
            except Exception as exc:  # keep the server alive on adapter bugs
                self._error("internal", f"{type(exc).__name__}: {exc}", status=500)

    return Handler


class BridgeServer:
    """Owns the HTTP server; usable programmatically or via the CLI."""

    def __init__(self, config: ServerConfig, adapter=None):
        self.config = config
        self._httpd = ThreadingHTTPServer((config.host, config.port),
                                          make_handler(config, adapter))
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_port

    @property
    def endpoint(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start_background(self) -> "BridgeServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._httpd.serve_forever()

    def shutdown(self):
        self._httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._httpd.server_close()


def serve(config: ServerConfig, adapter=None) -> None:
    """Blocking entry point: bind (failure exits nonzero) and serve."""
    server = BridgeServer(config, adapter)
    print(f"bridge server listening on {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
