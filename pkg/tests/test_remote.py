import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from cascade_attack.cascade import run_cascade
from cascade_attack.config import cascade_from_dict
from cascade_attack.errors import StageError
from cascade_attack.remote import Endpoint, RemoteStage, remote_stage_call
from cascade_attack.vocab import Vocabulary

RESPONSES = {
    "/fixed": b'{"prediction": 2, "scores": [0.0, 0.1, 0.9], "output_token_count": 3}',
    "/garbage": b"{not json",
    "/arity": b'{"prediction": 0, "scores": [1.0, 0.0], "output_token_count": 1}',
    "/missing": b'{"prediction": 0}',
}


class Stub(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        assert body["want_scores"] is True and isinstance(body["input"], str)
        payload = RESPONSES[self.path]
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def server():
    httpd = HTTPServer(("127.0.0.1", 0), Stub)
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()


def test_fixed_class(server):
    out = remote_stage_call(Endpoint(server + "/fixed", 3), "gold rises")
    assert out.prediction == 2 and out.scores == (0.0, 0.1, 0.9) and out.output_token_count == 3


def test_malformed_json(server):
    with pytest.raises(StageError) as exc:
        remote_stage_call(Endpoint(server + "/garbage", 3, id="stub"), "x")
    assert exc.value.endpoint == "stub" and exc.value.body == b"{not json"


def test_wrong_arity(server):
    with pytest.raises(StageError, match="arity"):
        remote_stage_call(Endpoint(server + "/arity", 3), "x")


def test_missing_keys(server):
    with pytest.raises(StageError):
        remote_stage_call(Endpoint(server + "/missing", 3), "x")


def test_unreachable():
    with pytest.raises(StageError):
        remote_stage_call(Endpoint("http://127.0.0.1:9/none", 3, timeout=0.5), "x")


def test_remote_stage_in_cascade(server):
    vocab = Vocabulary(["gold", "rises"])
    doc = {"vocab": list(vocab.surfaces), "stages": [{"kind": "remote", "url": server + "/fixed", "class_count": 3}]}
    spec = cascade_from_dict(doc)
    assert isinstance(spec.stages[0], RemoteStage) and not spec.stages[0].deterministic
    t = run_cascade(spec, vocab.encode("gold rises"))
    assert t.final_output == 2
