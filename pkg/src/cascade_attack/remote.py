"""HTTP stage adapter for plugging an external model server into a cascade.

Wire format (JSON over POST):

    request:  {"input": "<query text>", "want_scores": true}
    response: {"prediction": <int>, "scores": [<float>, ...], "output_token_count": <int>}

Remote stages are not deterministic as far as this package can tell, so
runs using them are marked as such in reports.
"""
from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .cascade import LinearCost, StageModel, StageOutput
from .errors import StageError


@dataclass(frozen=True)
class Endpoint:
    url: str
    class_count: int
    timeout: float = 10.0
    id: str = ""

    @property
    def name(self):
        return self.id or self.url


def remote_stage_call(endpoint: Endpoint, text: str) -> StageOutput:
    body = json.dumps({"input": text, "want_scores": True}).encode("utf-8")
    req = urllib.request.Request(endpoint.url, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            raw = resp.read()
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise StageError(f"remote stage {endpoint.name} unreachable: {exc}", endpoint.name) from exc
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise StageError(f"remote stage {endpoint.name} returned malformed JSON", endpoint.name, raw) from exc
    if not isinstance(doc, dict) or not {"prediction", "scores", "output_token_count"} <= doc.keys():
        raise StageError(f"remote stage {endpoint.name} response lacks prediction/scores/output_token_count",
                         endpoint.name, raw)
    scores = doc["scores"]
    if not isinstance(scores, list) or not all(isinstance(s, (int, float)) for s in scores):
        raise StageError(f"remote stage {endpoint.name} scores must be a list of numbers", endpoint.name, raw)
    if len(scores) != endpoint.class_count:
        raise StageError(f"remote stage {endpoint.name} returned {len(scores)} scores, "
                         f"expected arity {endpoint.class_count}", endpoint.name, raw)
    pred, n_out = doc["prediction"], doc["output_token_count"]
    if not isinstance(pred, int) or not 0 <= pred < endpoint.class_count:
        raise StageError(f"remote stage {endpoint.name} prediction {pred!r} is not a class id", endpoint.name, raw)
    if not isinstance(n_out, int) or n_out < 1:
        raise StageError(f"remote stage {endpoint.name} output_token_count {n_out!r} must be >= 1", endpoint.name, raw)
    return StageOutput(pred, tuple(float(s) for s in scores), n_out)


class RemoteStage(StageModel):
    deterministic = False

    def __init__(self, endpoint: Endpoint, vocab, cost=LinearCost(), param_scale=1.0):
        self.endpoint = endpoint
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.class_count = endpoint.class_count
        self.cost = cost
        self.param_scale = float(param_scale)

    def predict(self, x):
        return remote_stage_call(self.endpoint, self.vocab.decode(x))

    def scores(self, x):
        return np.asarray(self.predict(x).scores)
