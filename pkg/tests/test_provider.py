import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from PIL import Image

from gaussianize.camera import Camera
from gaussianize.field import DepthMap, DistanceField, sphere_trace_depth
from gaussianize.gaussians import init_gaussians
from gaussianize.provider import (InpaintRequest, ProceduralProvider, ProviderError, RemoteProvider,
                                  make_provider, procedural_texture, prompt_seed)
from gaussianize.views import GENERATE, KEEP, TriMask, classify_masks, composite_final, surface_points

from oracles import fibonacci_sphere


@pytest.fixture(scope="module")
def scene():
    pts = fibonacci_sphere(4000) * 0.45
    field = DistanceField(pts, normals=pts)
    g = init_gaussians(pts, pts)
    cam = Camera.look_at([1.5, -1.0, 0.8], width=32, height=32)
    depth = sphere_trace_depth(field, cam)
    tm = classify_masks(depth, cam, g, field)
    return cam, depth, tm


def request(scene, **kw):
    cam, depth, tm = scene
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    return InpaintRequest(img, depth, tm, kw.pop("prompt", "weathered bronze"), camera=cam, **kw)


# -- procedural --------------------------------------------------------------------

def test_procedural_deterministic(scene):
    p = ProceduralProvider()
    a = p.inpaint(request(scene)).image
    b = p.inpaint(request(scene)).image
    assert np.array_equal(a, b)


def test_procedural_colors_surface_points(scene):
    cam, depth, tm = scene
    req = request(scene)
    out = ProceduralProvider().inpaint(req).image
    hit = depth.hit_mask
    assert np.array_equal(out[hit], procedural_texture(surface_points(depth, cam), req.prompt))
    assert np.array_equal(out[~hit], req.image[~hit])


def test_all_keep_leaves_frame(scene):
    cam, depth, tm = scene
    keep = TriMask(np.where(depth.hit_mask, KEEP, 0).astype(np.uint8), tm.assignment, tm.sim)
    req = request(scene)
    req.trimask = keep
    resp = ProceduralProvider().inpaint(req)
    assert np.array_equal(composite_final(req.image, resp.image, keep), req.image)


def test_texture_world_space_consistent():
    p = np.array([0.1, -0.2, 0.3])
    a = procedural_texture(p, "red marble")
    b = procedural_texture(np.vstack([np.zeros(3), p]), "red marble")[1]
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


def test_prompts_differ():
    assert prompt_seed("red marble") != prompt_seed("blue tiles")
    p = np.random.default_rng(1).uniform(-0.5, 0.5, size=(50, 3))
    assert not np.array_equal(procedural_texture(p, "red marble"), procedural_texture(p, "blue tiles"))


def test_gradient_fixture_monotone():
    x = np.linspace(-0.5, 0.5, 41)
    line = np.column_stack([x, np.full(41, 0.1), np.full(41, -0.2)])
    c = procedural_texture(line, "gradient:x")
    assert np.all(np.diff(c[:, 0]) > 0)
    assert np.array_equal(c[:, 0], c[:, 1])


def test_request_validation(scene):
    with pytest.raises(ValueError):
        request(scene, strength_update=0.9, strength_generate=0.5).validate()
    with pytest.raises(ValueError):
        request(scene, strength_generate=0.0).validate()
    bad = request(scene)
    bad.image = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        bad.validate()


def test_procedural_needs_camera(scene):
    req = request(scene)
    req.camera = None
    with pytest.raises(ProviderError):
        ProceduralProvider().inpaint(req)


def test_make_provider():
    assert isinstance(make_provider("procedural"), ProceduralProvider)
    assert isinstance(make_provider("remote", url="http://x"), RemoteProvider)
    with pytest.raises(ValueError):
        make_provider("other")


# -- remote (mock server) ------------------------------------------------------------

FIXTURE = (np.arange(32 * 32 * 3) % 251).astype(np.uint8).reshape(32, 32, 3)


def png_b64(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class MockServer:
    def __init__(self):
        self.requests = []
        self.mode = "ok"
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((self.path, dict(self.headers), body))
                if outer.mode == "http500":
                    self.send_response(500)
                    self.end_headers()
                    return
                if outer.mode == "garbage":
                    payload = b"{not json"
                elif outer.mode == "wrong_size":
                    payload = json.dumps({"image": png_b64(FIXTURE[:16])}).encode()
                else:
                    payload = json.dumps({"image": png_b64(FIXTURE)}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = MockServer()
    yield s
    s.close()


def test_remote_round_trip(server, scene, monkeypatch):
    monkeypatch.setenv("GAP_PROVIDER_TOKEN", "s3cret")
    req = request(scene, seed=7)
    image_before = req.image.copy()
    resp = RemoteProvider(server.url + "/", timeout=5).inpaint(req)
    assert np.array_equal(resp.image, FIXTURE / 255.0)
    assert np.array_equal(req.image, image_before)
    path, headers, body = server.requests[0]
    assert path == "/v1/inpaint"
    assert headers["Authorization"] == "Bearer s3cret"
    assert set(body) == {"image", "depth", "mask", "prompt", "strength_generate", "strength_update", "seed"}
    assert body["seed"] == 7 and body["strength_generate"] == 1.0 and body["strength_update"] == 0.5
    depth = Image.open(io.BytesIO(base64.b64decode(body["depth"])))
    assert depth.mode.startswith("I") and depth.size == (32, 32)
    mask = np.asarray(Image.open(io.BytesIO(base64.b64decode(body["mask"]))))
    assert set(np.unique(mask)) <= {0, 85, 170, 255}
    assert np.count_nonzero(mask == 255) == np.count_nonzero(req.trimask.labels == GENERATE)


def test_remote_without_token(server, scene, monkeypatch):
    monkeypatch.delenv("GAP_PROVIDER_TOKEN", raising=False)
    RemoteProvider(server.url, timeout=5).inpaint(request(scene))
    assert "Authorization" not in server.requests[0][1]


@pytest.mark.parametrize("mode", ["http500", "garbage", "wrong_size"])
def test_remote_failures(server, scene, mode):
    server.mode = mode
    with pytest.raises(ProviderError):
        RemoteProvider(server.url, timeout=5).inpaint(request(scene))


def test_remote_unreachable(scene):
    s = MockServer()
    url = s.url
    s.close()
    with pytest.raises(ProviderError, match="failed"):
        RemoteProvider(url, timeout=2).inpaint(request(scene))


def test_remote_needs_url():
    with pytest.raises(ValueError):
        RemoteProvider("")
