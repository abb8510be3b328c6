"""Deterministic synthetic stage models, deciders and corpora.

Two families are provided:

* planted cascades built from :class:`TableModel` lookups, where every
  per-stage conditional accuracy and every routing probability is fixed
  exactly by construction;
* an attackable bag-of-words task (:func:`make_linear_task`) whose stage
  models and deciders are additive in the input tokens, so appended
  suffixes move scores in a way search can exploit.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import CascadeSpec, DecisionModule, LinearCost, StageModel
from .errors import ConfigError, ConstructionError
from .vocab import TokenSeq, Vocabulary

# weights are rounded to multiples of this so score sums are exact in float64
WEIGHT_QUANTUM = 1.0 / 64


def softmax_margin(scores: Sequence[float]) -> float:
    """Top-1 minus top-2 softmax probability; 1.0 for a single class."""
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        return 1.0
    p = np.exp(s - s.max())
    p /= p.sum()
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return float(e / (1.0 + e))


def quantize(a, quantum=WEIGHT_QUANTUM):
    return np.round(np.asarray(a, dtype=float) / quantum) * quantum


class TableModel(StageModel):
    """Lookup-table classifier keyed by the exact token sequence.

    ``table`` maps a token tuple to ``(label, margin)``; the score vector
    puts ``margin`` on the label and zero elsewhere.
    """

    def __init__(self, table, default, class_count, vocab_size, default_margin=1.0,
                 cost=LinearCost(), param_scale=1.0, output_tokens=1):
        self.table = {tuple(k): (int(v[0]), float(v[1])) for k, v in dict(table).items()}
        self.default = int(default)
        self.default_margin = float(default_margin)
        self.class_count = int(class_count)
        self.vocab_size = int(vocab_size)
        self.cost = cost
        self.param_scale = float(param_scale)
        self.output_tokens = int(output_tokens)
        bad = [f"{k}->{v}" for k, v in self.table.items() if not (0 <= v[0] < self.class_count and v[1] > 0)]
        if not (0 <= self.default < self.class_count and self.default_margin > 0):
            bad.append(f"default->({self.default}, {self.default_margin})")
        if bad:
            raise ConfigError("table entries need a label below class_count and a positive margin", bad[:10])

    def lookup(self, x):
        return self.table.get(tuple(x), (self.default, self.default_margin))

    def scores(self, x):
        label, margin = self.lookup(x)
        s = np.zeros(self.class_count)
        s[label] = margin
        return s


class LinearBagModel(StageModel):
    """``scores(x) = bias + sum of weights[t] for t in x``."""

    def __init__(self, weights, bias=None, cost=LinearCost(), param_scale=1.0, output_tokens=1):
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.ndim != 2:
            raise ConfigError("LinearBagModel weights must be a [vocab_size x class_count] matrix")
        self.vocab_size, self.class_count = self.weights.shape
        self.bias = np.zeros(self.class_count) if bias is None else np.asarray(bias, dtype=float)
        if self.bias.shape != (self.class_count,):
            raise ConfigError(f"bias has shape {self.bias.shape}, expected ({self.class_count},)")
        self.cost = cost
        self.param_scale = float(param_scale)
        self.output_tokens = int(output_tokens)

    def scores(self, x):
        if not len(x):
            return self.bias.copy()
        return self.bias + self.weights[np.fromiter(x, dtype=np.intp, count=len(x))].sum(axis=0)


class ThresholdDecider(DecisionModule):
    """Escalates iff the stage's softmax margin is below ``threshold``."""

    def __init__(self, threshold, cost=LinearCost(0.0, 0.0), param_scale=0.0, vocab_size=None):
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"threshold {threshold} outside [0, 1]")
        self.threshold = float(threshold)
        self.cost = cost
        self.param_scale = float(param_scale)
        self.vocab_size = vocab_size

    def confidence(self, x, out):
        return softmax_margin(out.scores)


class LinearDecider(DecisionModule):
    """Learned-style decider reading both the query tokens and the stage output.

    confidence = sigmoid(bias + sum(weights[t]) + margin_weight * softmax_margin)
    """

    def __init__(self, weights, bias=0.0, threshold=0.5, margin_weight=1.0,
                 cost=LinearCost(0.0, 0.0), param_scale=0.0):
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.ndim != 1:
            raise ConfigError("LinearDecider weights must be a vector over the vocabulary")
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"threshold {threshold} outside [0, 1]")
        self.vocab_size = self.weights.shape[0]
        self.bias = float(bias)
        self.threshold = float(threshold)
        self.margin_weight = float(margin_weight)
        self.cost = cost
        self.param_scale = float(param_scale)

    def logit(self, x, out):
        z = self.bias + self.margin_weight * softmax_margin(out.scores)
        if len(x):
            z += float(self.weights[np.fromiter(x, dtype=np.intp, count=len(x))].sum())
        return z

    def confidence(self, x, out):
        return _sigmoid(self.logit(x, out))


@dataclass(frozen=True)
class SyntheticCorpus:
    samples: tuple  # ((tokens, label), ...)
    vocab: Vocabulary
    seed: int = 0
    profile: object = None
    attack_vocab: tuple = ()

    def __len__(self):
        return len(self.samples)

    @property
    def inputs(self):
        return [s[0] for s in self.samples]

    @property
    def labels(self):
        return [s[1] for s in self.samples]

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"text": self.vocab.decode(x), "label": y}) for x, y in self.samples]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path, vocab: Vocabulary, attack_vocab=()) -> "SyntheticCorpus":
        samples = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                samples.append((vocab.encode(row["text"]), row["label"]))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{n}: bad corpus row ({exc})") from exc
        return cls(tuple(samples), vocab, attack_vocab=tuple(attack_vocab))


def make_words(n: int, start: int = 0) -> list[str]:
    """Deterministic pronounceable alphabetic surfaces (``baka``, ``bake``, ...)."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    syll = [c + v for c in consonants for v in vowels]
    out = []
    for k in itertools.count(2):
        for combo in itertools.product(syll, repeat=k):
            out.append("".join(combo))
            if len(out) >= start + n:
                return out[start:start + n]
    return out


PUNCT_SURFACES = [
    "!!", "??", "#%", "&*", "@@", "^^", "~~", "$#", "%%!", "}{", "][", "<<>", "|\\|", "+=+", "*&^", "#@!",
    "!?!", "::", ";;", "--!", "%$#@", "}}]]", "&&&", "@#$%", "^*^", "((", "))", "<>?", "~!~", "=>=", "/\\/", "#!#",
]


def random_suffix(attack_vocab: Sequence[int], length: int, seed) -> TokenSeq:
    """Uniform i.i.d. suffix over ``attack_vocab``; reproducible under ``seed``."""
    if length == 0:
        return ()
    if not len(attack_vocab):
        raise ConfigError("attack vocabulary is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, len(attack_vocab), size=length)
    return tuple(int(attack_vocab[i]) for i in idx)


# --------------------------------------------------------------------------
# planted cascades


@dataclass(frozen=True)
class PlantedProfile:
    """Exact targets for a planted cascade.

    ``route[j]`` is Pr[S_{j+1}] (the fraction stopping at stage j+1) and
    ``accuracy[i][j]`` is Pr[f^{i+1} correct | S_{j+1}]. Entries with
    ``j < i`` describe stages a sample never reaches inside the cascade;
    they are still planted so standalone evaluation is defined.
    """

    n_samples: int
    route: tuple
    accuracy: tuple
    n_classes: int = 4

    @classmethod
    def uniform(cls, n_samples, route, stage_accuracy, n_classes=4):
        """Each stage has the same accuracy on every routed subset."""
        l = len(route)
        return cls(n_samples, tuple(route), tuple(tuple([stage_accuracy[i]] * l) for i in range(l)), n_classes)

    @property
    def n_stages(self):
        return len(self.route)


STOP_MARGIN = 6.0
ESCALATE_MARGIN = 0.05
PLANTED_THRESHOLD = 0.5


def _exact_count(value, total, what, problems):
    frac = Fraction(value).limit_denominator(10**6)
    count = frac * total
    if count.denominator != 1:
        problems.append(f"{what}={value} of {total} samples is {float(count):g}, not an integer")
        return None
    return int(count)


def plan_counts(profile: PlantedProfile):
    """Integer subset sizes and per-(stage, subset) correct counts, or raise."""
    l = profile.n_stages
    problems = []
    if l < 1:
        problems.append("profile needs at least one stage")
    if len(profile.accuracy) != l or any(len(row) != l for row in profile.accuracy):
        problems.append(f"accuracy must be a {l}x{l} matrix")
    if problems:
        raise ConstructionError("infeasible profile", problems)
    for j, r in enumerate(profile.route):
        if not 0 <= r <= 1:
            problems.append(f"route[{j + 1}]={r} outside [0, 1]")
    for i, row in enumerate(profile.accuracy):
        for j, a in enumerate(row):
            if not 0 <= a <= 1:
                problems.append(f"accuracy[f{i + 1}|S{j + 1}]={a} outside [0, 1]")
    if profile.n_classes < 2:
        problems.append("n_classes must be at least 2")
    if problems:
        raise ConstructionError("infeasible profile", problems)
    sizes = [_exact_count(r, profile.n_samples, f"route[S{j + 1}]", problems) for j, r in enumerate(profile.route)]
    if None not in sizes and sum(sizes) != profile.n_samples:
        problems.append(f"route sizes {sizes} do not sum to {profile.n_samples}")
    correct = [[None] * l for _ in range(l)]
    for i in range(l):
        for j in range(l):
            if sizes[j] is not None:
                correct[i][j] = _exact_count(profile.accuracy[i][j], sizes[j], f"accuracy[f{i + 1}|S{j + 1}]", problems)
    if problems:
        raise ConstructionError("infeasible profile", problems)
    return sizes, correct


def _unique_inputs(n, vocab_ids, rng, min_len=3, max_len=7):
    seen, out = set(), []
    while len(out) < n:
        length = int(rng.integers(min_len, max_len + 1))
        x = tuple(int(t) for t in rng.choice(vocab_ids, size=length))
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def make_planted_cascade(profile: PlantedProfile, seed=0, vocab_words: int = 24):
    """Build a TableModel cascade and corpus hitting ``profile`` exactly.

    Routing is planted through the table margins: a stage's entry for a
    sample that should stop there gets a large margin (confident), a sample
    that should continue gets a tiny one, and every decider is a
    :class:`ThresholdDecider` at 0.5.
    """
    sizes, correct = plan_counts(profile)
    l, C, N = profile.n_stages, profile.n_classes, profile.n_samples
    rng = np.random.default_rng([int(seed), 0x91A7])
    vocab = Vocabulary(make_words(vocab_words))
    ids = np.arange(2, len(vocab))
    inputs = _unique_inputs(N, ids, rng)
    labels = [int(y) for y in rng.integers(0, C, size=N)]
    order = rng.permutation(N)
    subsets, start = [], 0
    for size in sizes:
        subsets.append([int(k) for k in order[start:start + size]])
        start += size
    stop_of = {}
    for j, members in enumerate(subsets):
        for k in members:
            stop_of[k] = j
    stages = []
    for i in range(l):
        table = {}
        for j, members in enumerate(subsets):
            right = set(rng.permutation(members)[: correct[i][j]].tolist()) if members else set()
            for k in members:
                y = labels[k]
                pred = y if k in right else (y + 1 + int(rng.integers(0, C - 1))) % C
                margin = ESCALATE_MARGIN if (i < l - 1 and stop_of[k] > i) else STOP_MARGIN
                table[inputs[k]] = (pred, margin)
        stages.append(TableModel(table, default=0, class_count=C, vocab_size=len(vocab),
                                 cost=LinearCost(0.0, float(10 ** i)), param_scale=float(2 ** i)))
    deciders = [ThresholdDecider(PLANTED_THRESHOLD, cost=LinearCost(0.0, 0.1), param_scale=0.1, vocab_size=len(vocab))
                for _ in range(l - 1)]
    spec = CascadeSpec(stages, deciders, vocab=vocab)
    corpus = SyntheticCorpus(tuple(zip(inputs, labels)), vocab, int(seed), profile)
    return spec, corpus


# --------------------------------------------------------------------------
# attackable bag-of-words task


@dataclass(frozen=True)
class LinearTaskParams:
    n_samples: int = 120
    n_classes: int = 4
    words_per_class: int = 6
    n_fillers: int = 20
    n_attack_tokens: int = 16
    weak_noise: float = 0.6
    weak_cross_noise: float = 0.35
    weak_attack_scale: float = 0.8
    decider_attack_scale: float = 1.5
    decider_bias: float = -1.6
    decider_margin_weight: float = 4.0
    strong_attack_scale: float = 0.0
    min_len: int = 6
    max_len: int = 10

    def to_dict(self):
        return dict(self.__dict__)


def make_linear_task(params: LinearTaskParams = LinearTaskParams(), seed=0):
    """Two-stage attackable cascade plus a labeled corpus.

    Each sample mixes keywords of its class with fewer keywords of one
    distractor class and neutral fillers; the label is the majority class.
    ``f^2`` counts keywords exactly and ignores punctuation tokens. ``f^1``
    has noisy keyword weights and reacts to punctuation tokens, and the
    linear decider reads punctuation tokens plus ``f^1``'s margin.
    """
    p = params
    if p.n_attack_tokens > len(PUNCT_SURFACES):
        raise ConfigError(f"at most {len(PUNCT_SURFACES)} attack tokens are available")
    C, K = p.n_classes, p.words_per_class
    rng = np.random.default_rng([int(seed), 0x11EA])
    words = make_words(C * K + p.n_fillers)
    content = [words[c * K:(c + 1) * K] for c in range(C)]
    fillers = words[C * K:]
    vocab = Vocabulary(words + PUNCT_SURFACES[: p.n_attack_tokens])
    V = len(vocab)
    content_ids = [[vocab.id_of(w) for w in ws] for ws in content]
    filler_ids = [vocab.id_of(w) for w in fillers]
    attack_ids = tuple(vocab.id_of(s) for s in PUNCT_SURFACES[: p.n_attack_tokens])

    strong = np.zeros((V, C))
    weak = np.zeros((V, C))
    dec = np.zeros(V)
    for c in range(C):
        for t in content_ids[c]:
            strong[t, c] = 1.0
            weak[t] = rng.normal(0.0, p.weak_cross_noise, size=C)
            weak[t, c] = 1.0 + rng.normal(0.0, p.weak_noise)
    for t in filler_ids:
        weak[t] = rng.normal(0.0, 0.2, size=C)
    for t in attack_ids:
        weak[t] = rng.normal(0.0, p.weak_attack_scale, size=C)
        strong[t] = rng.normal(0.0, p.strong_attack_scale, size=C) if p.strong_attack_scale else 0.0
        dec[t] = rng.normal(0.0, p.decider_attack_scale)

    f1 = LinearBagModel(quantize(weak), cost=LinearCost(0.01, 0.05), param_scale=0.35, output_tokens=2)
    f2 = LinearBagModel(quantize(strong), cost=LinearCost(0.2, 1.0), param_scale=7.0, output_tokens=4)
    g1 = LinearDecider(quantize(dec), bias=p.decider_bias, threshold=0.5, margin_weight=p.decider_margin_weight,
                       cost=LinearCost(0.002, 0.01), param_scale=0.11)
    spec = CascadeSpec((f1, f2), (g1,), vocab=vocab)

    samples = []
    for _ in range(p.n_samples):
        y = int(rng.integers(0, C))
        other = int((y + 1 + rng.integers(0, C - 1)) % C)
        n_true = int(rng.integers(2, 4))
        n_dis = int(rng.integers(0, n_true))
        length = int(rng.integers(max(p.min_len, n_true + n_dis), p.max_len + 1))
        toks = [int(t) for t in rng.choice(content_ids[y], size=n_true)]
        toks += [int(t) for t in rng.choice(content_ids[other], size=n_dis)]
        toks += [int(t) for t in rng.choice(filler_ids, size=length - n_true - n_dis)]
        rng.shuffle(toks)
        samples.append((tuple(toks), y))
    corpus = SyntheticCorpus(tuple(samples), vocab, int(seed), p, attack_ids)
    return spec, corpus
