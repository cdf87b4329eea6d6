"""Client-side bridge protocol tests against a minimal in-process HTTP stub.

The stub implements just enough of the wire protocol to exercise the
client; full protocol conformance lives with the reference server package.
"""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from distill3d import bridge, schedule
from distill3d.camera import RelativePose
from distill3d.denoisers import DenoiserCondition, delta_target_denoiser
from distill3d.errors import BridgeProtocolError, BridgeTransportError


class _StubHandler(BaseHTTPRequestHandler):
    schedule_payload = None
    mode = "delta_zero"   # delta_zero | wrong_shape | not_json | http_400
    seen = []

    def log_message(self, *args):
        pass

    def do_GET(self):
        if self.path == "/v1/schedule":
            self._send(200, self.schedule_payload)
        else:
            self._send(404, {"error": "not_found", "detail": self.path})

    def do_POST(self):
        if self.path != "/v1/denoise":
            self._send(404, {"error": "not_found", "detail": self.path})
            return
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        if self.mode == "http_400":
            self._send(400, {"error": "bad_shape", "detail": "stub rejection"})
            return
        if self.mode == "not_json":
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.end_headers()
            self.wfile.write(b"definitely not json")
            return
        shape = body["latent"]["shape"]
        raw = base64.b64decode(body["latent"]["data_b64"])
        z_t = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        sched = schedule.linear_schedule()
        eps = delta_target_denoiser(np.zeros(z_t.shape), sched).predict(z_t, body["t"])
        if self.mode == "wrong_shape":
            eps = eps[:, :2, :]
        self._send(200, {"eps": bridge.tensor_to_wire(eps)})

    def _send(self, code, payload):
        data = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def stub_server():
    sched = schedule.linear_schedule()
    _StubHandler.schedule_payload = {"num_steps": sched.num_steps,
                                     "betas": sched.betas.tolist()}
    _StubHandler.mode = "delta_zero"
    _StubHandler.seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", _StubHandler
    server.shutdown()
    thread.join(timeout=5)


class TestTensorWire:
    def test_roundtrip_bit_exact(self, rng):
        arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
        back = bridge.tensor_from_wire(bridge.tensor_to_wire(arr))
        assert np.array_equal(back.astype(np.float32), arr)

    def test_rejects_bad_payloads(self):
        with pytest.raises(BridgeProtocolError):
            bridge.tensor_from_wire({"shape": [2, 2]})
        with pytest.raises(BridgeProtocolError):
            bridge.tensor_from_wire({"shape": [2, 2], "data_b64": "!!!"})
        ok = bridge.tensor_to_wire(np.zeros((2, 2)))
        with pytest.raises(BridgeProtocolError):
            bridge.tensor_from_wire({"shape": [3, 3], "data_b64": ok["data_b64"]})


class TestRemoteDenoiser:
    def test_zero_latent_zero_eps(self, stub_server):
        url, _ = stub_server
        den = bridge.remote_denoiser(url)
        eps = den.predict(np.zeros((3, 4, 4)), 100, DenoiserCondition())
        assert np.abs(eps).max() < 1e-7

    def test_matches_in_process_oracle(self, stub_server, rng):
        url, _ = stub_server
        den = bridge.remote_denoiser(url)
        sched = schedule.linear_schedule()
        local = delta_target_denoiser(np.zeros((3, 4, 4)), sched)
        for _ in range(10):
            t = int(rng.integers(20, 981))
            z_t = rng.normal(size=(3, 4, 4)).astype(np.float32).astype(np.float64)
            remote_eps = den.predict(z_t, t, DenoiserCondition())
            local_eps = local.predict(z_t, t)
            assert np.abs(remote_eps - local_eps).max() <= 1e-6

    def test_condition_serialization(self, stub_server, rng):
        url, handler = stub_server
        den = bridge.remote_denoiser(url, kind="zero123")
        cond = DenoiserCondition(relative_pose=RelativePose(np.eye(3), np.array([0.1, 0.2, 0.3])),
                                 guidance_scale=2.5)
        den.predict(np.zeros((3, 4, 4)), 55, cond)
        body = handler.seen[-1]
        assert body["kind"] == "zero123"
        assert body["t"] == 55
        assert body["guidance_scale"] == 2.5
        assert body["relative_pose"]["T"] == [0.1, 0.2, 0.3]
        assert len(body["relative_pose"]["R"]) == 9

    def test_wrong_shape_is_protocol_error(self, stub_server):
        url, handler = stub_server
        handler.mode = "wrong_shape"
        den = bridge.remote_denoiser(url)
        with pytest.raises(BridgeProtocolError, match="shape"):
            den.predict(np.zeros((3, 4, 4)), 100, DenoiserCondition())

    def test_http_400_is_protocol_error(self, stub_server):
        url, handler = stub_server
        handler.mode = "http_400"
        den = bridge.remote_denoiser(url)
        with pytest.raises(BridgeProtocolError, match="bad_shape"):
            den.predict(np.zeros((3, 4, 4)), 100, DenoiserCondition())

    def test_non_json_is_protocol_error(self, stub_server):
        url, handler = stub_server
        handler.mode = "not_json"
        den = bridge.remote_denoiser(url)
        with pytest.raises(BridgeProtocolError):
            den.predict(np.zeros((3, 4, 4)), 100, DenoiserCondition())

    def test_connection_failure_is_transport_error(self):
        den = bridge.remote_denoiser("http://127.0.0.1:9", timeout=0.5)
        with pytest.raises(BridgeTransportError):
            den.predict(np.zeros((3, 4, 4)), 100, DenoiserCondition())


class TestRemoteSchedule:
    def test_fetch_matches_local(self, stub_server):
        url, _ = stub_server
        remote = bridge.fetch_remote_schedule(url)
        local = schedule.linear_schedule()
        assert remote.num_steps == local.num_steps
        assert np.abs(remote.betas - local.betas).max() == 0.0

    def test_transport_error(self):
        with pytest.raises(BridgeTransportError):
            bridge.fetch_remote_schedule("http://127.0.0.1:9", timeout=0.5)
