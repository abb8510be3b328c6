"""Input filters and randomized smoothing, plus defense success / over-defense rates.

Filters work on surface text: a trigger statistic is computed and, if it
fires, the last ``trim`` whitespace words are removed before the text is
re-encoded and sent through the cascade.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cascade import CascadeSpec, StageModel, StageOutput, run_cascade
from .errors import ConfigError, IntegrityError
from .vocab import Vocabulary

FILTER_KINDS = ("ppl", "regex", "cpt")
BOS, EOS, OOV = "<s>", "</s>", "<oov>"


@dataclass(frozen=True)
class FilterConfig:
    """``strength`` is the quantile q (ppl), the allowed special-character
    ratio (regex) or the CPT threshold (cpt). ``cpt_direction`` chooses
    whether CPT triggers above or below the threshold."""

    kind: str
    strength: float
    trim: int = 0
    cpt_direction: str = "above"

    def __post_init__(self):
        problems = []
        if self.kind not in FILTER_KINDS:
            problems.append(f"kind={self.kind!r} not in {FILTER_KINDS}")
        elif self.kind == "ppl" and not 0 < self.strength <= 1:
            problems.append(f"ppl quantile q={self.strength} outside (0, 1]")
        elif self.kind == "regex" and not 0 <= self.strength <= 1:
            problems.append(f"regex ratio={self.strength} outside [0, 1]")
        elif self.kind == "cpt" and not self.strength > 0:
            problems.append(f"cpt threshold={self.strength} must be > 0")
        if self.trim < 0:
            problems.append(f"trim={self.trim} must be >= 0")
        if self.cpt_direction not in ("above", "below"):
            problems.append(f"cpt_direction={self.cpt_direction!r} must be 'above' or 'below'")
        if problems:
            raise ConfigError("invalid filter config", problems)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.35
    n_draws: int = 16
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.sigma < 0:
            problems.append(f"sigma={self.sigma} must be >= 0")
        if self.n_draws < 1:
            problems.append(f"n_draws={self.n_draws} must be >= 1")
        if problems:
            raise ConfigError("invalid smoothing config", problems)


def trim_tail(text: str, n: int) -> str:
    if n <= 0:
        return text
    words = text.split()
    return " ".join(words[: max(0, len(words) - n)])


# --------------------------------------------------------------------------
# perplexity


class BigramLM:
    """Add-one smoothed word bigram model with sentence boundary markers."""

    def __init__(self, texts: Sequence[str]):
        self.unigrams = Counter()
        self.bigrams = Counter()
        types = {EOS, OOV}
        for text in texts:
            words = text.split()
            types.update(words)
            seq = [BOS] + words + [EOS]
            self.unigrams.update(seq[:-1])
            self.bigrams.update(zip(seq[:-1], seq[1:]))
        self.types = frozenset(types)
        self.V = len(self.types)

    def _map(self, w):
        return w if w in self.types or w == BOS else OOV

    def log_prob(self, prev, word) -> float:
        prev, word = self._map(prev), self._map(word)
        return math.log((self.bigrams[(prev, word)] + 1) / (self.unigrams[prev] + self.V))

    def perplexity(self, text: str) -> float:
        seq = [BOS] + text.split() + [EOS]
        lp = sum(self.log_prob(a, b) for a, b in zip(seq[:-1], seq[1:]))
        return math.exp(-lp / (len(seq) - 1))


class PerplexityReference:
    """Reference LM plus the clean-corpus perplexity distribution."""

    def __init__(self, clean_texts: Sequence[str], lm: BigramLM | None = None):
        self.lm = lm or BigramLM(clean_texts)
        self.clean_ppl = np.sort(np.array([self.lm.perplexity(t) for t in clean_texts if t.split()]))
        if not self.clean_ppl.size:
            raise ConfigError("perplexity reference needs non-empty clean texts")

    def threshold(self, q: float) -> float:
        # an observed order statistic, so at most a (1 - q) share of clean texts exceeds it
        return float(np.quantile(self.clean_ppl, q, method="higher"))


def ppl_filter(text: str, reference: PerplexityReference, cfg: FilterConfig):
    if not text.split():
        return text, False
    triggered = reference.lm.perplexity(text) > reference.threshold(cfg.strength)
    return (trim_tail(text, cfg.trim) if triggered else text), triggered


def special_char_ratio(text: str) -> float:
    if not text:
        return 0.0
    special = sum(1 for ch in text if not (ch.isalnum() or ch.isspace()))
    return special / len(text)


def regex_filter(text: str, cfg: FilterConfig):
    triggered = special_char_ratio(text) > cfg.strength
    return (trim_tail(text, cfg.trim) if triggered else text), triggered


def chars_per_token(text: str, vocab: Vocabulary) -> float | None:
    n = len(vocab.encode(text))
    return len(text) / n if n else None


def cpt_filter(text: str, vocab: Vocabulary, cfg: FilterConfig):
    cpt = chars_per_token(text, vocab)
    if cpt is None:
        return text, False
    triggered = cpt > cfg.strength if cfg.cpt_direction == "above" else cpt < cfg.strength
    return (trim_tail(text, cfg.trim) if triggered else text), triggered


def make_filter(cfg: FilterConfig, reference: PerplexityReference | None = None,
                vocab: Vocabulary | None = None) -> Callable[[str], tuple]:
    if cfg.kind == "ppl":
        if reference is None:
            raise ConfigError("ppl filter needs a fitted PerplexityReference")
        return lambda t: ppl_filter(t, reference, cfg)
    if cfg.kind == "regex":
        return lambda t: regex_filter(t, cfg)
    if vocab is None:
        raise ConfigError("cpt filter needs a vocabulary")
    return lambda t: cpt_filter(t, vocab, cfg)


def is_stricter(kind: str, a: float, b: float, cpt_direction: str = "above") -> bool:
    """True if strength ``a`` filters at least as strictly as ``b``."""
    if kind == "cpt" and cpt_direction == "below":
        return a >= b
    return a <= b


# --------------------------------------------------------------------------
# randomized smoothing


def smooth_predict(model: StageModel, x, cfg: SmoothingConfig) -> StageOutput:
    """Majority vote over Gaussian-perturbed score vectors.

    The noise stream is keyed by the input, so the result is a pure
    function of ``(model, x, cfg)``. ``scores`` is the mean noisy score
    vector; ``prediction`` is the vote winner (lowest class on ties), which
    can differ from the argmax of the mean.
    """
    x = tuple(x)
    base = np.asarray(model.scores(x), dtype=float)
    if cfg.sigma == 0:
        return StageOutput.from_scores(base, model.output_tokens)
    rng = np.random.default_rng([int(cfg.seed), len(x), *x])
    noisy = base + rng.normal(0.0, cfg.sigma, size=(cfg.n_draws, base.size))
    votes = np.bincount(noisy.argmax(axis=1), minlength=base.size)
    return StageOutput(int(votes.argmax()), tuple(float(v) for v in noisy.mean(axis=0)), model.output_tokens)


class SmoothedStage(StageModel):
    def __init__(self, model: StageModel, cfg: SmoothingConfig):
        self.model = model
        self.cfg = cfg
        self.vocab_size = model.vocab_size
        self.class_count = model.class_count
        self.param_scale = model.param_scale
        self.output_tokens = model.output_tokens
        self.cost = model.cost

    def scores(self, x):
        return self.model.scores(x)

    def predict(self, x):
        return smooth_predict(self.model, x, self.cfg)

    def cost_of(self, x):
        return self.model.cost_of(x)


def smoothed_spec(spec: CascadeSpec, cfg: SmoothingConfig) -> CascadeSpec:
    return CascadeSpec(tuple(SmoothedStage(m, cfg) for m in spec.stages), spec.deciders, spec.vocab,
                       spec.max_sequence_length)


# --------------------------------------------------------------------------
# evaluation


def outcome(spec: CascadeSpec, x):
    """What the cascade does with x: (returned prediction, stopping stage)."""
    t = run_cascade(spec, x)
    return t.final_output, t.stopping_index


def defense_eval(clean_inputs, attacked_inputs, attack_succeeded, defense, spec: CascadeSpec, mapper=map) -> dict:
    """Defense success rate and over-defense rate.

    DSR: among attacks that changed the cascade outcome, the share whose
    outcome after the defense equals the undefended clean outcome.
    ODR: among clean inputs, the share whose outcome changes when the
    defense is switched on.

    ``defense`` is either a text filter ``str -> (str, triggered)`` or a
    :class:`SmoothingConfig`.
    """
    clean_inputs, attacked_inputs, attack_succeeded = list(clean_inputs), list(attacked_inputs), list(attack_succeeded)
    if not (len(clean_inputs) == len(attacked_inputs) == len(attack_succeeded)):
        raise IntegrityError(f"unpaired defense inputs: {len(clean_inputs)} clean, {len(attacked_inputs)} attacked, "
                             f"{len(attack_succeeded)} flags")
    if isinstance(defense, SmoothingConfig):
        dspec = smoothed_spec(spec, defense)
        defended = lambda x: outcome(dspec, x)
    else:
        if spec.vocab is None:
            raise ConfigError("text filters need a cascade with a vocabulary")
        vocab = spec.vocab

        def defended(x):
            text, _ = defense(vocab.decode(x))
            return outcome(spec, vocab.encode(text))

    clean_out = list(mapper(lambda x: outcome(spec, x), clean_inputs))
    clean_def = list(mapper(defended, clean_inputs))
    idx = [k for k, s in enumerate(attack_succeeded) if s]
    adv_def = list(mapper(defended, [attacked_inputs[k] for k in idx]))
    restored = sum(1 for k, o in zip(idx, adv_def) if o == clean_out[k])
    over = sum(1 for a, b in zip(clean_out, clean_def) if a != b)
    return {
        "defense_success_rate": restored / len(idx) if idx else 0.0,
        "over_defense_rate": over / len(clean_inputs) if clean_inputs else 0.0,
        "n_attacked_success": len(idx),
        "n_clean": len(clean_inputs),
    }
