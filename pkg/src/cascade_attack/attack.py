"""Suffix attacks on cascades: single-target and the alternating joint attack.

Search is gray-box: objectives only query stage scores and decider
confidences. Every random draw comes from a generator keyed by
``(seed, sample_id, round, phase, ...)`` so an attack on one sample is a
pure function of its inputs and independent of evaluation order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .cascade import CascadeSpec
from .errors import AttackError, ConfigError
from .vocab import TokenSeq
from .zoo import random_suffix

MODES = ("single_acc", "single_cost", "dm_flip", "joint")
BACKENDS = ("greedy", "genetic")
MAXIMIZE, MINIMIZE = "maximize", "minimize"
TIERS = ("i", "ii", "iii")
MAX_RESTARTS = 3
# enumerate the whole Hamming ball when it is at most this large
ENUMERATION_LIMIT = 20000

_PHASE_F, _PHASE_G, _GATE, _SINGLE, _RANDOM = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class Neighborhood:
    suffix_slots_per_phase: int = 2
    rounds: int = 2
    candidate_pool_size: int = 64
    substitutions_per_iteration: int = 2
    attack_vocab: tuple = ()

    @property
    def total_length(self) -> int:
        return 2 * self.rounds * self.suffix_slots_per_phase


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "joint"
    target_stages: tuple = (1,)
    rounds: int = 2
    iterations: int = 8
    pass_rate: float = 1.0
    seed: int = 0
    backend: str = "greedy"
    suffix_slots: int = 2
    pool_size: int = 64
    substitutions: int = 2
    attack_vocab: tuple = ()
    loss: str = "margin"

    def __post_init__(self):
        object.__setattr__(self, "target_stages", tuple(int(i) for i in self.target_stages))
        object.__setattr__(self, "attack_vocab", tuple(int(t) for t in self.attack_vocab))
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode={self.mode!r} not in {MODES}")
        if self.backend not in BACKENDS:
            problems.append(f"backend={self.backend!r} not in {BACKENDS}")
        if not self.target_stages:
            problems.append("target_stages is empty")
        if any(i < 1 for i in self.target_stages):
            problems.append(f"target_stages {self.target_stages} must be 1-based")
        if self.rounds < 1:
            problems.append(f"rounds={self.rounds} must be >= 1")
        if self.iterations < 1:
            problems.append(f"iterations={self.iterations} must be >= 1")
        if not 0.0 <= self.pass_rate <= 1.0:
            problems.append(f"pass_rate={self.pass_rate} outside [0, 1]")
        if self.suffix_slots < 1:
            problems.append(f"suffix_slots={self.suffix_slots} must be >= 1")
        if self.pool_size < 1:
            problems.append(f"pool_size={self.pool_size} must be >= 1")
        if self.substitutions < 0:
            problems.append(f"substitutions={self.substitutions} must be >= 0")
        if self.loss not in ("margin", "cross_entropy"):
            problems.append(f"loss={self.loss!r} must be 'margin' or 'cross_entropy'")
        if self.seed < 0:
            problems.append(f"seed={self.seed} must be non-negative")
        if problems:
            raise ConfigError("invalid attack config", problems)

    @property
    def neighborhood(self) -> Neighborhood:
        return Neighborhood(self.suffix_slots, self.rounds, self.pool_size, self.substitutions, self.attack_vocab)

    def check_spec(self, spec: CascadeSpec) -> None:
        l = spec.n_stages
        bad = [i for i in self.target_stages if not 1 <= i <= l - 1]
        if bad:
            raise ConfigError(f"target stages {bad} outside 1..{l - 1}")
        if not self.attack_vocab:
            raise ConfigError("attack vocabulary is empty")
        if spec.vocab_size is not None:
            oob = [t for t in self.attack_vocab if not 0 <= t < spec.vocab_size]
            if oob:
                raise ConfigError("attack vocabulary ids outside the cascade vocabulary", [str(t) for t in oob[:10]])

    def to_dict(self):
        d = asdict(self)
        d["target_stages"] = list(self.target_stages)
        d["attack_vocab"] = list(self.attack_vocab)
        return d


def keyed_rng(seed, sample_id, *keys) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_id), *(int(k) for k in keys)])


# --------------------------------------------------------------------------
# objectives


def _loss(scores, y, kind="margin") -> float:
    s = np.asarray(scores, dtype=float)
    others = np.delete(s, y)
    if kind == "cross_entropy":
        m = s.max()
        return float(m + math.log(np.exp(s - m).sum()) - s[y])
    return float(others.max() - s[y]) if others.size else float(-s[y])


def acc_loss(spec: CascadeSpec, inp: TokenSeq, y, stages: Sequence[int], kind="margin") -> float:
    """Sum over targeted stages of the negated classification margin."""
    total = 0.0
    for i in stages:
        total += _loss(spec.stages[i - 1].scores(inp), y, kind)
    return total


def probe(spec: CascadeSpec, inp: TokenSeq, stages: Sequence[int]) -> dict:
    """Stage output, decision bit and confidence at each targeted stage."""
    out = {}
    for i in stages:
        o = spec.stages[i - 1].predict(inp)
        bit, conf = spec.deciders[i - 1].decide(inp, o)
        out[i] = (o, bit, conf)
    return out


def cost_key(spec: CascadeSpec, probed: dict, signs: dict | None = None) -> tuple:
    """(escalation count, confidence-gap surrogate), optionally signed per stage.

    The count is the primary objective; the surrogate ``threshold -
    confidence`` only orders candidates with equal counts.
    """
    count, gap = 0.0, 0.0
    for i, (_, bit, conf) in probed.items():
        s = 1.0 if signs is None else signs[i]
        count += s * bit
        gap += s * (spec.deciders[i - 1].threshold - conf)
    return (count, gap)


@dataclass(frozen=True)
class Objective:
    kind: str  # "acc_loss" | "cost_escalation"
    loss: str = "margin"

    def evaluate(self, spec, inp, y, stages) -> tuple:
        if self.kind == "acc_loss":
            return (acc_loss(spec, inp, y, stages, self.loss),)
        if self.kind == "cost_escalation":
            return cost_key(spec, probe(spec, inp, stages))
        raise ConfigError(f"unknown objective kind {self.kind!r}")


# --------------------------------------------------------------------------
# candidate generation and the update operator


def _ball_size(incumbent, vocab_set, n_vocab, k) -> int:
    alts = [n_vocab - (t in vocab_set) for t in incumbent]
    e = [1] + [0] * k  # elementary symmetric polynomials, truncated at k
    for a in alts:
        for j in range(k, 0, -1):
            e[j] += e[j - 1] * a
    return sum(e)


def _enumerate_ball(incumbent, vocab, k):
    L = len(incumbent)
    out = []
    for m in range(1, k + 1):
        for pos in itertools.combinations(range(L), m):
            choices = [[v for v in vocab if v != incumbent[p]] for p in pos]
            for repl in itertools.product(*choices):
                seg = list(incumbent)
                for p, v in zip(pos, repl):
                    seg[p] = v
                out.append(tuple(seg))
    return out


def propose_candidates(incumbent: TokenSeq, nb: Neighborhood, rng: np.random.Generator) -> list:
    """Distinct segments within Hamming distance ``substitutions`` of the incumbent.

    The incumbent is always candidate 0. The list order is the candidate
    ordinal used for tie-breaking.
    """
    vocab = tuple(dict.fromkeys(nb.attack_vocab))
    if not vocab:
        raise ConfigError("attack vocabulary is empty")
    incumbent = tuple(incumbent)
    k = min(nb.substitutions_per_iteration, len(incumbent))
    want = nb.candidate_pool_size
    if k == 0 or want <= 1:
        return [incumbent]
    size = _ball_size(incumbent, set(vocab), len(vocab), k)
    if size <= ENUMERATION_LIMIT:
        others = _enumerate_ball(incumbent, vocab, k)
        order = rng.permutation(len(others))
        return [incumbent] + [others[j] for j in order[: want - 1]]
    seen = {incumbent}
    out = [incumbent]
    L = len(incumbent)
    while len(out) < want:
        m = int(rng.integers(1, k + 1))
        seg = list(incumbent)
        for p in rng.choice(L, size=m, replace=False):
            alts = [v for v in vocab if v != incumbent[p]]
            if alts:
                seg[p] = alts[int(rng.integers(0, len(alts)))]
        seg = tuple(seg)
        if seg not in seen:
            seen.add(seg)
            out.append(seg)
    return out


def _evaluate(fn, seg):
    try:
        return fn(seg)
    except AttackError:
        raise
    except Exception as exc:
        raise AttackError(f"objective evaluation failed: {exc!r}", candidate=seg) from exc


def _best_index(keys) -> int:
    best = 0
    for j in range(1, len(keys)):
        if keys[j] > keys[best]:
            best = j
    return best


def greedy_update(segment, fn: Callable, nb: Neighborhood, iterations: int, rng):
    """Best-of-pool coordinate search; never accepts a worse candidate."""
    segment = tuple(segment)
    key = _evaluate(fn, segment)
    trajectory = [key]
    for _ in range(iterations):
        cands = propose_candidates(segment, nb, rng)
        keys = [key] + [_evaluate(fn, c) for c in cands[1:]]
        j = _best_index(keys)
        if keys[j] > key:
            segment, key = cands[j], keys[j]
        trajectory.append(key)
    return segment, trajectory


def genetic_update(segment, fn: Callable, nb: Neighborhood, iterations: int, rng, elite: int = 2, tournament: int = 3):
    """Elitist genetic search seeded with the incumbent's neighborhood."""
    segment = tuple(segment)
    vocab = tuple(dict.fromkeys(nb.attack_vocab))
    pop = propose_candidates(segment, Neighborhood(nb.suffix_slots_per_phase, nb.rounds, nb.candidate_pool_size,
                                                   max(1, nb.substitutions_per_iteration), vocab), rng)
    keys = [_evaluate(fn, c) for c in pop]
    best_seg, best_key = segment, keys[0]
    trajectory = [best_key]
    L = len(segment)
    size = max(len(pop), min(nb.candidate_pool_size, 2))
    for _ in range(iterations):
        order = sorted(range(len(pop)), key=lambda j: keys[j], reverse=True)  # stable: ordinal breaks ties
        nxt = [pop[j] for j in order[:elite]]
        while len(nxt) < size:
            parents = []
            for _ in range(2):
                picks = rng.choice(len(pop), size=min(tournament, len(pop)), replace=False)
                parents.append(pop[min(picks, key=lambda j: (tuple(-v for v in keys[j]), j))])
            mask = rng.random(L) < 0.5
            child = [parents[0][p] if mask[p] else parents[1][p] for p in range(L)]
            for p in range(L):
                if rng.random() < 1.0 / max(L, 1):
                    child[p] = vocab[int(rng.integers(0, len(vocab)))]
            nxt.append(tuple(child))
        pop = nxt
        keys = [_evaluate(fn, c) for c in pop]
        j = _best_index(keys)
        if keys[j] > best_key:
            best_seg, best_key = pop[j], keys[j]
        trajectory.append(best_key)
    return best_seg, trajectory


def update_operator(segment, fn: Callable, nb: Neighborhood, iterations: int, rng, backend="greedy"):
    """Run ``iterations`` steps of the chosen backend; returns (segment, trajectory)."""
    if iterations < 1:
        raise ConfigError(f"update budget {iterations} must be >= 1")
    if backend == "greedy":
        return greedy_update(segment, fn, nb, iterations, rng)
    if backend == "genetic":
        return genetic_update(segment, fn, nb, iterations, rng)
    raise ConfigError(f"unknown backend {backend!r}")


# --------------------------------------------------------------------------
# tiered selection and the pass-rate gate


def tier_of(preds: dict, snapshot: dict, y) -> str:
    if all(preds[i] == snapshot[i] for i in snapshot):
        return "i"
    if all(preds[i] != y for i in snapshot if snapshot[i] != y):
        return "ii"
    return "iii"


def _tier_rank(tier):
    return {"i": 2, "ii": 1, "iii": 0}[tier]


def _directed(key, direction):
    return tuple(key) if direction == MAXIMIZE else tuple(-v for v in key)


def select_index(cost_values, predictions, snapshot, y, direction):
    tiers = [tier_of(p, snapshot, y) for p in predictions]
    for tier in TIERS:
        pool = [j for j, t in enumerate(tiers) if t == tier or (tier == "ii" and t == "i")]
        if pool:
            best = pool[0]
            for j in pool[1:]:
                if _directed(cost_values[j], direction) > _directed(cost_values[best], direction):
                    best = j
            return best, tier
    raise AttackError("no candidates to select from")


def constrained_select(candidates, cost_values, predictions, snapshot: dict, y, direction=MAXIMIZE):
    """Pick a decision-phase candidate under the three priority tiers.

    Tier i keeps every targeted prediction equal to ``snapshot``; tier ii
    keeps every stage that was wrong at the snapshot wrong; tier iii is
    everything. Within the first non-empty tier the L_cost value is
    optimized in ``direction``; ties go to the lowest ordinal.
    """
    if not len(candidates):
        raise AttackError("no candidates to select from")
    j, tier = select_index(cost_values, predictions, snapshot, y, direction)
    return candidates[j], tier


def pass_rate_gate(p: float, attack_succeeded: bool, seed: int, sample_id: int, round_: int) -> str:
    """Escalate unsuccessful samples always; successful ones with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"pass rate p={p} outside [0, 1]")
    if not attack_succeeded:
        return MAXIMIZE
    u = keyed_rng(seed, sample_id, round_, _GATE).random()
    return MAXIMIZE if u < p else MINIMIZE


# --------------------------------------------------------------------------
# attacks


@dataclass
class AttackReport:
    sample_id: int
    mode: str
    per_round: list = field(default_factory=list)
    suffix_tokens: list = field(default_factory=list)
    suffix_text: str = ""

    def to_dict(self):
        return {"sample_id": self.sample_id, "mode": self.mode, "per_round": self.per_round,
                "suffix_tokens": list(self.suffix_tokens), "suffix_text": self.suffix_text}


def _primary(key):
    return float(key[0])


def _suffix_text(spec, suffix):
    return spec.vocab.decode(suffix) if spec.vocab is not None else " ".join(map(str, suffix))


def single_target_attack(x, y, spec: CascadeSpec, cfg: AttackConfig, sample_id: int = 0):
    """Optimize one objective over ``2 * rounds`` consecutive segments.

    single_acc maximizes the targeted stages' loss, single_cost maximizes
    their escalation count, dm_flip escalates stages that were right on the
    clean input and stops stages that were wrong.
    """
    if cfg.mode not in ("single_acc", "single_cost", "dm_flip"):
        raise ConfigError(f"single_target_attack got mode {cfg.mode!r}")
    cfg.check_spec(spec)
    x = tuple(x)
    I = cfg.target_stages
    nb = cfg.neighborhood
    signs = None
    if cfg.mode == "dm_flip":
        signs = {i: (1.0 if spec.stages[i - 1].predict(x).prediction == y else -1.0) for i in I}
    delta = ()
    report = AttackReport(sample_id, cfg.mode)
    for seg_no in range(2 * cfg.rounds):
        rng = keyed_rng(cfg.seed, sample_id, seg_no + 1, _SINGLE)
        seg = random_suffix(cfg.attack_vocab, cfg.suffix_slots, rng)
        ctx = x + delta
        if cfg.mode == "single_acc":
            fn = lambda s, ctx=ctx: (acc_loss(spec, ctx + s, y, I, cfg.loss),)
        else:
            fn = lambda s, ctx=ctx: cost_key(spec, probe(spec, ctx + s, I), signs)
        seg, traj = update_operator(seg, fn, nb, cfg.iterations, rng, cfg.backend)
        delta += seg
        report.per_round.append({
            "round": seg_no // 2 + 1, "phase": "f" if seg_no % 2 == 0 else "g",
            "objective_before": _primary(traj[0]), "objective_after": _primary(traj[-1]),
            "tier": None, "direction": MAXIMIZE, "restarts": 0,
            "trajectory": [_primary(k) for k in traj],
        })
    report.suffix_tokens = list(delta)
    report.suffix_text = _suffix_text(spec, delta)
    return x + delta, report


def _decision_phase(spec, ctx, y, I, snapshot, direction, seg, nb, cfg, rng):
    """T iterations of propose + constrained_select around ``seg``."""

    def evaluate(s):
        try:
            probed = probe(spec, ctx + s, I)
        except Exception as exc:
            raise AttackError(f"objective evaluation failed: {exc!r}", candidate=s) from exc
        return cost_key(spec, probed), {i: probed[i][0].prediction for i in I}

    if cfg.backend == "genetic":
        def fn(s):
            ck, preds = evaluate(s)
            return (_tier_rank(tier_of(preds, snapshot, y)),) + _directed(ck, direction)

        seg, traj = genetic_update(seg, fn, nb, cfg.iterations, rng)
        ck, preds = evaluate(seg)
        return seg, tier_of(preds, snapshot, y), ck, [k[1] if direction == MAXIMIZE else -k[1] for k in traj]

    ck, preds = evaluate(seg)
    trajectory = [ck[0]]
    for _ in range(cfg.iterations):
        cands = propose_candidates(seg, nb, rng)
        evals = [(ck, preds)] + [evaluate(c) for c in cands[1:]]
        j, _ = select_index([e[0] for e in evals], [e[1] for e in evals], snapshot, y, direction)
        seg, (ck, preds) = cands[j], evals[j]
        trajectory.append(ck[0])
    return seg, tier_of(preds, snapshot, y), ck, trajectory


def joint_attack(x, y, spec: CascadeSpec, cfg: AttackConfig, sample_id: int = 0):
    """Alternating prediction/decision suffix attack with tiered selection.

    Each round appends an f-segment optimized for the targeted stages' loss,
    snapshots their predictions, then appends a g-segment chosen to raise or
    lower escalation (per the pass-rate gate) while preserving the damage.
    A g-phase ending in tier iii is restarted from a fresh random segment
    up to three times; the best attempt is kept.
    """
    if cfg.mode != "joint":
        raise ConfigError(f"joint_attack got mode {cfg.mode!r}")
    cfg.check_spec(spec)
    x = tuple(x)
    I = cfg.target_stages
    nb = cfg.neighborhood
    delta = ()
    report = AttackReport(sample_id, "joint")
    for r in range(1, cfg.rounds + 1):
        rng = keyed_rng(cfg.seed, sample_id, r, _PHASE_F)
        seg = random_suffix(cfg.attack_vocab, cfg.suffix_slots, rng)
        ctx = x + delta
        fn = lambda s, ctx=ctx: (acc_loss(spec, ctx + s, y, I, cfg.loss),)
        seg, traj = update_operator(seg, fn, nb, cfg.iterations, rng, cfg.backend)
        delta += seg
        report.per_round.append({
            "round": r, "phase": "f", "objective_before": _primary(traj[0]), "objective_after": _primary(traj[-1]),
            "tier": None, "direction": MAXIMIZE, "restarts": 0, "trajectory": [_primary(k) for k in traj],
        })

        snapshot = {i: spec.stages[i - 1].predict(x + delta).prediction for i in I}
        succeeded = all(snapshot[i] != y for i in I)
        direction = pass_rate_gate(cfg.pass_rate, succeeded, cfg.seed, sample_id, r)
        ctx = x + delta
        best = None
        for attempt in range(MAX_RESTARTS + 1):
            grng = keyed_rng(cfg.seed, sample_id, r, _PHASE_G, attempt)
            init = random_suffix(cfg.attack_vocab, cfg.suffix_slots, grng)
            init_key = cost_key(spec, probe(spec, ctx + init, I))
            gseg, tier, ck, gtraj = _decision_phase(spec, ctx, y, I, snapshot, direction, init, nb, cfg, grng)
            rank = (_tier_rank(tier),) + _directed(ck, direction)
            if best is None or rank > best[0]:
                best = (rank, gseg, tier, ck, init_key, gtraj)
            if tier != "iii":
                break
        _, gseg, tier, ck, init_key, gtraj = best
        delta += gseg
        report.per_round.append({
            "round": r, "phase": "g", "objective_before": _primary(init_key), "objective_after": _primary(ck),
            "tier": tier, "direction": direction, "restarts": attempt, "trajectory": gtraj,
            "snapshot_success": succeeded,
        })
    report.suffix_tokens = list(delta)
    report.suffix_text = _suffix_text(spec, delta)
    return x + delta, report


def random_noise_attack(x, y, spec: CascadeSpec, cfg: AttackConfig, sample_id: int = 0):
    """Random-Noise baseline: an unoptimized suffix of the full budget length."""
    rng = keyed_rng(cfg.seed, sample_id, 0, _RANDOM)
    delta = random_suffix(cfg.attack_vocab, cfg.neighborhood.total_length, rng)
    report = AttackReport(sample_id, "random_noise", [], list(delta), _suffix_text(spec, delta))
    return tuple(x) + delta, report


def attack_sample(x, y, spec: CascadeSpec, cfg: AttackConfig, sample_id: int = 0):
    if cfg.mode == "joint":
        return joint_attack(x, y, spec, cfg, sample_id)
    return single_target_attack(x, y, spec, cfg, sample_id)
