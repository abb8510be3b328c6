"""Executable semantics of an l-stage cascade with early-exit deciders.

A query runs through stage models in order. After stage ``i < l`` the
decider ``g^i`` sees the query and the stage output and emits 1 (escalate)
or 0 (stop and return the stage prediction). The final stage always stops.
Stages after the stopping index are never evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, IntegrityError
from .vocab import TokenSeq, Vocabulary

DEFAULT_MAX_SEQUENCE_LENGTH = 512


@dataclass(frozen=True)
class StageOutput:
    prediction: object
    scores: tuple
    output_token_count: int = 1

    @classmethod
    def from_scores(cls, scores, output_token_count=1, labels=None):
        """Argmax with ties going to the lowest index."""
        scores = tuple(float(s) for s in scores)
        best = int(np.argmax(scores))  # np.argmax returns the first maximum
        prediction = best if labels is None else labels[best]
        return cls(prediction, scores, int(output_token_count))


@dataclass(frozen=True)
class LinearCost:
    """Simulated execution cost ``a * len(x) + b`` in abstract units."""

    a: float = 0.0
    b: float = 1.0

    def __call__(self, n_tokens: int) -> float:
        return self.a * n_tokens + self.b

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ConfigError("cost coefficients must be non-negative", [f"a={self.a}", f"b={self.b}"])


class StageModel:
    """A stage predictor ``f^i``. Subclasses implement :meth:`scores`."""

    vocab_size: int
    class_count: int
    param_scale: float = 1.0
    output_tokens: int = 1
    cost: LinearCost = LinearCost()
    deterministic = True

    def scores(self, x: TokenSeq) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x: TokenSeq) -> StageOutput:
        return StageOutput.from_scores(self.scores(x), self.output_tokens)

    def cost_of(self, x: TokenSeq) -> float:
        return self.cost(len(x))


class DecisionModule:
    """A decider ``g^i``: bit 1 escalates, bit 0 stops."""

    vocab_size: int | None = None
    threshold: float = 0.5
    param_scale: float = 0.0
    cost: LinearCost = LinearCost(0.0, 0.0)

    def confidence(self, x: TokenSeq, out: StageOutput) -> float:
        raise NotImplementedError

    def decide(self, x: TokenSeq, out: StageOutput) -> tuple[int, float]:
        c = self.confidence(x, out)
        return (1 if c < self.threshold else 0), c

    def cost_of(self, x: TokenSeq, out: StageOutput) -> float:
        return self.cost(len(x))


@dataclass(frozen=True)
class CascadeSpec:
    stages: tuple
    deciders: tuple = ()
    vocab: Vocabulary | None = None
    max_sequence_length: int = DEFAULT_MAX_SEQUENCE_LENGTH

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "deciders", tuple(self.deciders))
        problems = []
        if not self.stages:
            problems.append("cascade has no stages")
        elif len(self.deciders) != len(self.stages) - 1:
            problems.append(f"{len(self.stages)} stages need {len(self.stages) - 1} deciders, got {len(self.deciders)}")
        sizes = {m.vocab_size for m in (*self.stages, *self.deciders) if getattr(m, "vocab_size", None) is not None}
        if self.vocab is not None:
            sizes.add(len(self.vocab))
        if len(sizes) > 1:
            problems.append(f"components disagree on vocabulary size: {sorted(sizes)}")
        if problems:
            raise ConfigError("invalid cascade", problems)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def vocab_size(self) -> int | None:
        if self.vocab is not None:
            return len(self.vocab)
        for m in (*self.stages, *self.deciders):
            if getattr(m, "vocab_size", None) is not None:
                return m.vocab_size
        return None

    def validate_input(self, x: Sequence[int]) -> None:
        n = self.vocab_size
        if n is not None:
            bad = [t for t in x if not 0 <= t < n]
            if bad:
                raise ConfigError(f"input tokens outside the cascade vocabulary (size {n})", [str(t) for t in bad[:10]])
        if len(x) > self.max_sequence_length:
            raise ConfigError(f"input length {len(x)} exceeds max_sequence_length {self.max_sequence_length}")


@dataclass(frozen=True)
class StageRecord:
    stage: int  # 1-based
    output: StageOutput
    decision: int | None  # None marks the terminal stage l
    confidence: float | None
    model_cost: float
    decider_cost: float
    input_tokens: int
    model_scale: float = 0.0
    decider_scale: float = 0.0


@dataclass(frozen=True)
class ExecutionTrace:
    per_stage: tuple
    stopping_index: int
    final_output: object
    total_cost: float
    n_stages: int
    input_len: int = field(default=0)

    @property
    def decisions(self) -> list:
        return [r.decision for r in self.per_stage]

    def to_dict(self) -> dict:
        return {
            "stopping_index": self.stopping_index,
            "final_output": self.final_output,
            "total_cost": self.total_cost,
            "n_stages": self.n_stages,
            "input_len": self.input_len,
            "per_stage": [
                {
                    "stage": r.stage,
                    "prediction": r.output.prediction,
                    "scores": list(r.output.scores),
                    "output_tokens": r.output.output_token_count,
                    "decision": r.decision,
                    "confidence": r.confidence,
                    "model_cost": r.model_cost,
                    "decider_cost": r.decider_cost,
                    "input_tokens": r.input_tokens,
                    "model_scale": r.model_scale,
                    "decider_scale": r.decider_scale,
                }
                for r in self.per_stage
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionTrace":
        per_stage = tuple(
            StageRecord(
                stage=s["stage"],
                output=StageOutput(s["prediction"], tuple(s["scores"]), s["output_tokens"]),
                decision=s["decision"],
                confidence=s["confidence"],
                model_cost=s["model_cost"],
                decider_cost=s["decider_cost"],
                input_tokens=s["input_tokens"],
                model_scale=s.get("model_scale", 0.0),
                decider_scale=s.get("decider_scale", 0.0),
            )
            for s in d["per_stage"]
        )
        return cls(per_stage, d["stopping_index"], d["final_output"], d["total_cost"], d["n_stages"], d.get("input_len", 0))


def stopping_index(trace: ExecutionTrace) -> int:
    """First stage whose decider said stop, else the last stage."""
    for r in trace.per_stage:
        if r.decision == 0:
            return r.stage
    return trace.n_stages


def _fold(values) -> float:
    total = 0.0
    for v in values:
        total += v
    return total


def total_cost(trace: ExecutionTrace, spec: CascadeSpec | None = None) -> float:
    """Model costs up to tau plus decider costs up to tau.

    The final stage has no decider, so it is charged zero; a decider that
    ran at ``tau < l`` is charged.
    """
    if spec is not None and spec.n_stages != trace.n_stages:
        raise IntegrityError(f"trace has {trace.n_stages} stages, spec has {spec.n_stages}")
    if len(trace.per_stage) != trace.stopping_index:
        raise IntegrityError(f"trace records {len(trace.per_stage)} stages but stops at {trace.stopping_index}")
    return _fold(r.model_cost for r in trace.per_stage) + _fold(r.decider_cost for r in trace.per_stage)


def run_cascade(spec: CascadeSpec, x: TokenSeq, query_len: int | None = None) -> ExecutionTrace:
    """Evaluate ``x`` lazily through the cascade.

    ``query_len`` is the length used to normalize token cost; it defaults
    to ``len(x)`` and the runner sets it to the clean query length when
    ``x`` carries an adversarial suffix.
    """
    if not isinstance(spec, CascadeSpec) or not spec.stages:
        raise ConfigError("run_cascade needs a non-empty CascadeSpec")
    x = tuple(x)
    spec.validate_input(x)
    l = spec.n_stages
    records = []
    for i, model in enumerate(spec.stages, start=1):
        out = model.predict(x)
        mcost = model.cost_of(x)
        if i < l:
            decider = spec.deciders[i - 1]
            bit, conf = decider.decide(x, out)
            dcost = decider.cost_of(x, out)
            records.append(StageRecord(i, out, int(bit), float(conf), mcost, dcost, len(x),
                                       model.param_scale, decider.param_scale))
            if bit == 0:
                break
        else:
            records.append(StageRecord(i, out, None, None, mcost, 0.0, len(x), model.param_scale, 0.0))
    tau = len(records)
    partial = ExecutionTrace(tuple(records), tau, records[-1].output.prediction, 0.0, l,
                             len(x) if query_len is None else query_len)
    return ExecutionTrace(partial.per_stage, tau, partial.final_output, total_cost(partial, spec), l, partial.input_len)
