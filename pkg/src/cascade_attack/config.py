"""JSON documents for cascades and experiments.

Cascade document (``schema: "cascade/v1"``)::

    {"schema": "cascade/v1",
     "vocab": ["<unk>", "<pad>", "gold", ...]  |  "vocab_file": "vocab.txt",
     "max_sequence_length": 512,
     "stages": [{"kind": "linear_bag", "weights": [[...]], "bias": [...],
                 "cost": {"a": 0.01, "b": 0.05}, "param_scale": 0.35, "output_tokens": 2},
                {"kind": "table", "class_count": 4, "default": 0, "default_margin": 1.0,
                 "entries": [{"tokens": [2, 5], "label": 1, "margin": 6.0}], ...},
                {"kind": "remote", "url": "http://...", "class_count": 4, "timeout": 10}],
     "deciders": [{"kind": "threshold", "threshold": 0.5, "cost": {...}, "param_scale": 0.1},
                  {"kind": "linear", "weights": [...], "bias": -1.6, "threshold": 0.5,
                   "margin_weight": 4.0, ...}]}

Experiment document (``schema: "experiment/v1"``) is described by
:class:`ExperimentConfig`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .attack import BACKENDS, AttackConfig
from .cascade import DEFAULT_MAX_SEQUENCE_LENGTH, CascadeSpec, LinearCost
from .defenses import FILTER_KINDS, FilterConfig, SmoothingConfig
from .errors import ConfigError
from .remote import Endpoint, RemoteStage
from .vocab import Vocabulary
from .zoo import LinearBagModel, LinearDecider, LinearTaskParams, PlantedProfile, TableModel, ThresholdDecider

CASCADE_SCHEMA = "cascade/v1"
EXPERIMENT_SCHEMA = "experiment/v1"
OUTPUT_ROOT_ENV = "CASCADE_ATTACK_OUTPUT"


def _cost(doc, problems, where):
    c = doc.get("cost", {})
    try:
        return LinearCost(float(c.get("a", 0.0)), float(c.get("b", 1.0 if where.startswith("stage") else 0.0)))
    except ConfigError as exc:
        problems.append(f"{where}.cost: {exc}")
        return LinearCost()


def _stage_from_doc(doc, vocab, problems, where):
    kind = doc.get("kind")
    cost = _cost(doc, problems, where)
    scale = float(doc.get("param_scale", 1.0))
    try:
        if kind == "table":
            table = {tuple(e["tokens"]): (e["label"], e.get("margin", 1.0)) for e in doc.get("entries", [])}
            return TableModel(table, doc.get("default", 0), doc["class_count"], len(vocab),
                              doc.get("default_margin", 1.0), cost, scale, doc.get("output_tokens", 1))
        if kind == "linear_bag":
            return LinearBagModel(doc["weights"], doc.get("bias"), cost, scale, doc.get("output_tokens", 1))
        if kind == "remote":
            ep = Endpoint(doc["url"], int(doc["class_count"]), float(doc.get("timeout", 10.0)), doc.get("id", ""))
            return RemoteStage(ep, vocab, cost, scale)
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        problems.append(f"{where}: {exc!r}")
        return None
    problems.append(f"{where}.kind={kind!r} must be one of table, linear_bag, remote")
    return None


def _decider_from_doc(doc, vocab, problems, where):
    kind = doc.get("kind")
    cost = _cost(doc, problems, where)
    scale = float(doc.get("param_scale", 0.0))
    try:
        if kind == "threshold":
            return ThresholdDecider(doc["threshold"], cost, scale, len(vocab))
        if kind == "linear":
            return LinearDecider(doc["weights"], doc.get("bias", 0.0), doc.get("threshold", 0.5),
                                 doc.get("margin_weight", 1.0), cost, scale)
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        problems.append(f"{where}: {exc!r}")
        return None
    problems.append(f"{where}.kind={kind!r} must be one of threshold, linear")
    return None


def cascade_from_dict(doc: dict, base_dir=".") -> CascadeSpec:
    problems = []
    if doc.get("schema", CASCADE_SCHEMA) != CASCADE_SCHEMA:
        problems.append(f"schema={doc.get('schema')!r}, expected {CASCADE_SCHEMA!r}")
    if "vocab" in doc:
        vocab = Vocabulary(doc["vocab"])
    elif "vocab_file" in doc:
        vocab = Vocabulary.load(Path(base_dir) / doc["vocab_file"])
    else:
        raise ConfigError("invalid cascade document", ["vocab or vocab_file is required"])
    stages = [_stage_from_doc(s, vocab, problems, f"stages[{k}]") for k, s in enumerate(doc.get("stages", []))]
    deciders = [_decider_from_doc(d, vocab, problems, f"deciders[{k}]") for k, d in enumerate(doc.get("deciders", []))]
    if not stages:
        problems.append("stages is empty")
    if problems:
        raise ConfigError("invalid cascade document", problems)
    return CascadeSpec(stages, deciders, vocab, int(doc.get("max_sequence_length", DEFAULT_MAX_SEQUENCE_LENGTH)))


def _cost_doc(c: LinearCost):
    return {"a": c.a, "b": c.b}


def cascade_to_dict(spec: CascadeSpec) -> dict:
    stages = []
    for m in spec.stages:
        if isinstance(m, TableModel):
            entries = [{"tokens": list(k), "label": v[0], "margin": v[1]} for k, v in sorted(m.table.items())]
            stages.append({"kind": "table", "class_count": m.class_count, "default": m.default,
                           "default_margin": m.default_margin, "entries": entries})
        elif isinstance(m, LinearBagModel):
            stages.append({"kind": "linear_bag", "weights": m.weights.tolist(), "bias": m.bias.tolist()})
        elif isinstance(m, RemoteStage):
            e = m.endpoint
            stages.append({"kind": "remote", "url": e.url, "class_count": e.class_count, "timeout": e.timeout, "id": e.id})
        else:
            raise ConfigError(f"cannot serialize stage of type {type(m).__name__}")
        stages[-1].update(cost=_cost_doc(m.cost), param_scale=m.param_scale, output_tokens=m.output_tokens)
    deciders = []
    for d in spec.deciders:
        if isinstance(d, ThresholdDecider):
            deciders.append({"kind": "threshold", "threshold": d.threshold})
        elif isinstance(d, LinearDecider):
            deciders.append({"kind": "linear", "weights": d.weights.tolist(), "bias": d.bias,
                             "threshold": d.threshold, "margin_weight": d.margin_weight})
        else:
            raise ConfigError(f"cannot serialize decider of type {type(d).__name__}")
        deciders[-1].update(cost=_cost_doc(d.cost), param_scale=d.param_scale)
    return {"schema": CASCADE_SCHEMA, "vocab": list(spec.vocab.surfaces), "max_sequence_length": spec.max_sequence_length,
            "stages": stages, "deciders": deciders}


def load_cascade(path) -> CascadeSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read cascade document {path}: {exc}") from exc
    return cascade_from_dict(doc, path.parent)


# --------------------------------------------------------------------------
# experiment documents

DEFAULT_P_SWEEP = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
BASELINE_MODES = ("random_noise", "single_acc", "single_cost", "dm_flip")


@dataclass
class ExperimentConfig:
    """A full experiment.

    ``task`` names a generator producing both the cascade and corpus
    (``{"generator": "linear_task" | "planted", "params": {...}}``);
    alternatively ``cascade`` (inline document or ``{"path": ...}``) and
    ``corpus`` (``{"path": ...}``) are given explicitly.
    ``attack`` holds shared attack settings plus ``modes`` (baselines to
    run, possibly empty or ``["none"]``) and ``p_sweep`` for the joint attack.
    """

    seed: int
    task: dict | None = None
    cascade: dict | None = None
    corpus: dict | None = None
    attack: dict = field(default_factory=dict)
    defense: list = field(default_factory=list)
    output_dir: str = ""
    threads: int = 1
    schema: str = EXPERIMENT_SCHEMA
    base_dir: str = field(default=".", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {"schema": self.schema, "seed": self.seed}
        for k in ("task", "cascade", "corpus"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        d.update(attack=self.attack, defense=self.defense, output_dir=self.output_dir, threads=self.threads)
        return d

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        problems = []
        if not isinstance(doc, dict):
            raise ConfigError("experiment document must be a JSON object")
        if doc.get("schema") != EXPERIMENT_SCHEMA:
            problems.append(f"schema={doc.get('schema')!r}, expected {EXPERIMENT_SCHEMA!r}")
        seed = doc.get("seed", doc.get("global_seed"))
        if not isinstance(seed, int) or seed < 0:
            problems.append("seed is mandatory and must be a non-negative integer")
        known = {"schema", "seed", "global_seed", "task", "cascade", "corpus", "attack", "defense", "output_dir", "threads"}
        problems += [f"unknown field {k!r}" for k in doc if k not in known]
        task, cascade, corpus = doc.get("task"), doc.get("cascade"), doc.get("corpus")
        if task is not None:
            if task.get("generator") not in ("linear_task", "planted"):
                problems.append(f"task.generator={task.get('generator')!r} must be linear_task or planted")
        elif cascade is None or corpus is None:
            problems.append("either task, or both cascade and corpus, must be given")
        attack = doc.get("attack", {})
        problems += _attack_problems(attack)
        defense = doc.get("defense", [])
        if not isinstance(defense, list):
            problems.append("defense must be a list")
            defense = []
        for k, d in enumerate(defense):
            problems += _defense_problems(d, f"defense[{k}]")
        threads = doc.get("threads", 1)
        if not isinstance(threads, int) or threads < 1:
            problems.append(f"threads={threads!r} must be a positive integer")
        if problems:
            raise ConfigError("invalid experiment config", problems)
        return cls(seed=seed, task=task, cascade=cascade, corpus=corpus, attack=attack, defense=defense,
                   output_dir=doc.get("output_dir", ""), threads=threads, base_dir=str(base_dir))

    @property
    def p_sweep(self):
        return tuple(float(p) for p in self.attack.get("p_sweep", DEFAULT_P_SWEEP))

    @property
    def modes(self):
        return [m for m in self.attack.get("modes", list(BASELINE_MODES)) if m != "none"]

    @property
    def attacks_enabled(self) -> bool:
        return "none" not in self.attack.get("modes", [])

    def attack_config(self, mode="joint", pass_rate=1.0, attack_vocab=()) -> AttackConfig:
        a = self.attack
        return AttackConfig(mode=mode, target_stages=tuple(a.get("target_stages", (1,))), rounds=a.get("rounds", 2),
                            iterations=a.get("iterations", 8), pass_rate=pass_rate, seed=self.seed,
                            backend=a.get("backend", "greedy"), suffix_slots=a.get("suffix_slots", 2),
                            pool_size=a.get("pool_size", 64), substitutions=a.get("substitutions", 2),
                            attack_vocab=tuple(attack_vocab), loss=a.get("loss", "margin"))

    def resolve_output_dir(self, override=None) -> Path:
        if override:
            return Path(override)
        if self.output_dir:
            out = Path(self.output_dir)
            return out if out.is_absolute() else Path(self.base_dir) / out
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"experiment-seed{self.seed}"


def _attack_problems(a):
    problems = []
    if not isinstance(a, dict):
        return ["attack must be an object"]
    known = {"modes", "p_sweep", "target_stages", "rounds", "iterations", "backend", "suffix_slots", "pool_size",
             "substitutions", "attack_vocab", "loss"}
    problems += [f"attack: unknown field {k!r}" for k in a if k not in known]
    for m in a.get("modes", []):
        if m not in BASELINE_MODES + ("none",):
            problems.append(f"attack.modes: {m!r} not in {BASELINE_MODES + ('none',)}")
    for p in a.get("p_sweep", []):
        if not isinstance(p, (int, float)) or not 0 <= p <= 1:
            problems.append(f"attack.p_sweep: {p!r} outside [0, 1]")
    for k in ("rounds", "iterations", "suffix_slots", "pool_size"):
        if k in a and (not isinstance(a[k], int) or a[k] < 1):
            problems.append(f"attack.{k}={a[k]!r} must be a positive integer")
    if "substitutions" in a and (not isinstance(a["substitutions"], int) or a["substitutions"] < 0):
        problems.append(f"attack.substitutions={a['substitutions']!r} must be a non-negative integer")
    if a.get("backend", "greedy") not in BACKENDS:
        problems.append(f"attack.backend={a.get('backend')!r} not in {BACKENDS}")
    return problems


def _defense_problems(d, where):
    if not isinstance(d, dict):
        return [f"{where} must be an object"]
    kind = d.get("kind")
    if kind == "smoothing":
        try:
            SmoothingConfig(d.get("sigma", 0.35), d.get("n_draws", 16), d.get("seed", 0))
        except ConfigError as exc:
            return [f"{where}: {exc}"]
        return []
    if kind not in FILTER_KINDS:
        return [f"{where}.kind={kind!r} must be one of {FILTER_KINDS + ('smoothing',)}"]
    problems = []
    strengths = d.get("strengths")
    if not isinstance(strengths, list) or not strengths:
        problems.append(f"{where}.strengths must be a non-empty list")
        strengths = []
    for s in strengths:
        try:
            FilterConfig(kind, s, d.get("trim", 0), d.get("cpt_direction", "above"))
        except ConfigError as exc:
            problems.append(f"{where}: {exc}")
    return problems


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc, path.parent)


def task_params(task: dict):
    params = dict(task.get("params", {}))
    if task["generator"] == "linear_task":
        return LinearTaskParams(**params)
    route = tuple(params.pop("route"))
    acc = params.pop("accuracy")
    if acc and not isinstance(acc[0], list):
        return PlantedProfile.uniform(params.pop("n_samples"), route, acc, **params)
    return PlantedProfile(params.pop("n_samples"), route, tuple(tuple(r) for r in acc), **params)
