"""Task and efficiency metrics over cascade traces."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .cascade import CascadeSpec, ExecutionTrace
from .errors import IntegrityError

INPUT_TOKEN_PRICE = 0.01
OUTPUT_TOKEN_PRICE = 0.03
DECIDER_OUTPUT_TOKENS = 1

_PUNCT = re.compile(r"[^0-9a-z\s]")


def normalize_text(text: str) -> str:
    """Lowercase, drop non-alphanumeric non-space characters, collapse whitespace."""
    return " ".join(_PUNCT.sub("", text.lower()).split())


def exact_match(pred_text: str, gold_text: str) -> int:
    return int(normalize_text(pred_text) == normalize_text(gold_text))


def labels_equal(a, b) -> bool:
    if isinstance(a, str) and isinstance(b, str):
        return bool(exact_match(a, b))
    return a == b


def accuracy(predictions, labels) -> float:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise IntegrityError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise IntegrityError("accuracy of an empty set is undefined")
    return sum(labels_equal(p, y) for p, y in zip(predictions, labels)) / len(labels)


def full_coverage(generated: str, concepts) -> tuple[float, int]:
    """Fraction of concept words present in the generated text, and whether all are."""
    concepts = set(concepts)
    if not concepts:
        raise IntegrityError("concept set is empty")
    words = set(normalize_text(generated).split())
    hit = sum(normalize_text(c) in words for c in concepts)
    cov = hit / len(concepts)
    return cov, int(hit == len(concepts))


def _component_cost(input_tokens, output_tokens, scale):
    return (INPUT_TOKEN_PRICE * input_tokens + OUTPUT_TOKEN_PRICE * output_tokens) * scale


def normalized_token_cost(trace: ExecutionTrace, spec: CascadeSpec | None = None, input_len: int | None = None) -> float:
    """Price-weighted tokens of every executed component, scaled by size, per query token.

    Deciders are charged one output token. The final stage has no decider.
    Scales come from ``spec`` when given, else from the trace records.
    """
    input_len = trace.input_len if input_len is None else input_len
    if input_len < 1:
        raise IntegrityError("input_len must be >= 1 to normalize token cost")
    total = 0.0
    for r in trace.per_stage:
        if spec is not None:
            mscale = spec.stages[r.stage - 1].param_scale
            dscale = spec.deciders[r.stage - 1].param_scale if r.stage < spec.n_stages else 0.0
        else:
            mscale, dscale = r.model_scale, r.decider_scale
        total += _component_cost(r.input_tokens, r.output.output_token_count, mscale)
        if r.decision is not None:
            total += _component_cost(r.input_tokens, DECIDER_OUTPUT_TOKENS, dscale)
    return total / input_len


def token_cost_from_row(row: dict) -> float:
    """Recompute normalized token cost from a serialized trace row."""
    total = 0.0
    for s in row["per_stage"]:
        total += _component_cost(s["input_tokens"], s["output_tokens"], s["model_scale"])
        if s["decision"] is not None:
            total += _component_cost(s["input_tokens"], DECIDER_OUTPUT_TOKENS, s["decider_scale"])
    return total / row["input_len"]


def pass_rate(stop_stages, n_stages: int) -> list[float]:
    """rho_i = fraction of samples that went past boundary i, for i in 1..l-1."""
    stop_stages = list(stop_stages)
    if not stop_stages:
        raise IntegrityError("pass rate of an empty set is undefined")
    n = len(stop_stages)
    return [sum(s > i for s in stop_stages) / n for i in range(1, n_stages)]


def dm_confusion(traces, labels, n_stages: int) -> list[dict]:
    """Per decider, counts of (stage prediction correct, escalated) among samples reaching it."""
    out = [{"correct_stop": 0, "correct_escalate": 0, "wrong_stop": 0, "wrong_escalate": 0} for _ in range(n_stages - 1)]
    for trace, y in zip(traces, labels):
        for r in trace.per_stage:
            if r.decision is None:
                continue
            key = ("correct" if labels_equal(r.output.prediction, y) else "wrong") + ("_escalate" if r.decision else "_stop")
            out[r.stage - 1][key] += 1
    return out


@dataclass
class MetricReport:
    task_metric: dict
    normalized_token_cost: float
    simulated_time: float
    pass_rates: list
    dm_confusion: list = field(default_factory=list)
    n: int = 0

    def to_dict(self):
        return {"task_metric": self.task_metric, "normalized_token_cost": self.normalized_token_cost,
                "simulated_time": self.simulated_time, "pass_rates": self.pass_rates,
                "dm_confusion": self.dm_confusion, "n": self.n}

    @classmethod
    def from_dict(cls, d):
        return cls(d["task_metric"], d["normalized_token_cost"], d["simulated_time"], d["pass_rates"],
                   d.get("dm_confusion", []), d.get("n", 0))


def _mean(values):
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def metric_report(traces, labels, n_stages: int, task_name: str = "accuracy") -> MetricReport:
    traces, labels = list(traces), list(labels)
    acc = accuracy([t.final_output for t in traces], labels)
    return MetricReport(
        task_metric={"name": task_name, "value": acc},
        normalized_token_cost=_mean([normalized_token_cost(t) for t in traces]),
        simulated_time=_mean([t.total_cost for t in traces]),
        pass_rates=pass_rate([t.stopping_index for t in traces], n_stages),
        dm_confusion=dm_confusion(traces, labels, n_stages),
        n=len(traces),
    )


def delta_percent(attacked: float, initial: float) -> str:
    """Signed relative change with one decimal, e.g. ``-73.1%``."""
    if initial == 0:
        return "n/a"
    return f"{(attacked - initial) / initial * 100:+.1f}%"
