import http.server
import json
import threading

import numpy as np
import pytest

from voxsplat.oracle import (Candidate, ConstantOptimumOracle, HttpThresholdOracle,
                             OracleError, ScriptedMaskOracle, oracle_from_spec)


def candidates(thresholds, images):
    return [Candidate(threshold=t, image=img) for t, img in zip(thresholds, images)]


def blank(h=20, w=30, value=127):
    return np.full((h, w, 3), value, np.uint8)


def with_block(y0, y1, x0, x1, h=20, w=30):
    img = blank(h, w)
    img[y0:y1, x0:x1] = (200, 40, 40)
    return img


def test_constant_optimum_oracle():
    oracle = ConstantOptimumOracle(0.72)
    cands = candidates([0.5, 0.625, 0.75, 0.875, 1.0], [blank()] * 5)
    assert oracle.best_index("q", 0, cands) == 2
    # ties resolve to the first (lower) candidate
    oracle = ConstantOptimumOracle(0.6875)
    assert oracle.best_index("q", 0, cands) == 1


def test_scripted_mask_oracle_prefers_matching_mask():
    mask = np.zeros((20, 30), bool)
    mask[5:15, 10:20] = True
    oracle = ScriptedMaskOracle({7: mask.astype(np.uint8) * 255})
    cands = candidates(
        [0.5, 0.75, 1.0],
        [with_block(0, 20, 0, 30),   # everything painted: IoU ~ mask/whole
         with_block(5, 15, 10, 20),  # exact match
         blank()])                   # nothing painted
    assert oracle.best_index("q", 7, cands) == 1


def test_scripted_mask_oracle_missing_viewpoint():
    oracle = ScriptedMaskOracle({})
    with pytest.raises(OracleError):
        oracle.best_index("q", 3, candidates([0.5], [blank()]))


def test_scripted_mask_oracle_from_json(tmp_path):
    from voxsplat.dataset import write_color_png
    mask = np.zeros((20, 30, 3), np.uint8)
    mask[2:9, 3:12] = 255
    write_color_png(tmp_path / "m.png", mask)
    spec = tmp_path / "oracle.json"
    spec.write_text(json.dumps({"masks": {"4": "m.png"}}))
    oracle = ScriptedMaskOracle.from_json(spec)
    got = oracle.best_index("q", 4, candidates([0.5, 1.0],
                                               [with_block(2, 9, 3, 12), blank()]))
    assert got == 0


class _Handler(http.server.BaseHTTPRequestHandler):
    calls = []
    respond_with = {"best_index": 1}

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.calls.append(body)
        payload = json.dumps(self.respond_with).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def oracle_server():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.calls = []
    yield f"http://127.0.0.1:{server.server_port}/judge"
    server.shutdown()


def test_http_oracle_wire_protocol(oracle_server):
    oracle = HttpThresholdOracle(oracle_server, timeout=5.0, retries=0)
    cands = candidates([0.5, 0.75], [with_block(1, 5, 1, 5), blank()])
    assert oracle.best_index("a red box", 9, cands) == 1
    sent = _Handler.calls[-1]
    assert sent["query"] == "a red box"
    assert sent["viewpoint_id"] == 9
    assert [c["threshold"] for c in sent["candidates"]] == [0.5, 0.75]
    import base64, io
    from PIL import Image
    decoded = np.asarray(Image.open(io.BytesIO(
        base64.b64decode(sent["candidates"][0]["image_png_base64"]))))
    assert np.array_equal(decoded, with_block(1, 5, 1, 5))


def test_http_oracle_rejects_out_of_range(oracle_server):
    _Handler.respond_with = {"best_index": 5}
    oracle = HttpThresholdOracle(oracle_server, timeout=5.0, retries=0)
    with pytest.raises(OracleError):
        oracle.best_index("q", 0, candidates([0.5], [blank()]))
    _Handler.respond_with = {"best_index": 1}


def test_http_oracle_unreachable_retries_then_fails():
    oracle = HttpThresholdOracle("http://127.0.0.1:9/never", timeout=0.2,
                                 retries=2, retry_wait=0.01)
    with pytest.raises(OracleError):
        oracle.best_index("q", 0, candidates([0.5], [blank()]))


def test_oracle_from_spec(tmp_path):
    assert isinstance(oracle_from_spec("const:0.7"), ConstantOptimumOracle)
    assert isinstance(oracle_from_spec("http://x.test/j"), HttpThresholdOracle)
    spec = tmp_path / "o.json"
    spec.write_text(json.dumps({"masks": {}}))
    assert isinstance(oracle_from_spec(f"scripted:{spec}"), ScriptedMaskOracle)
    with pytest.raises(OracleError):
        oracle_from_spec("nope")
