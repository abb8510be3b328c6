import itertools

import numpy as np
import pytest

from cascade_attack.attack import (MAXIMIZE, MINIMIZE, AttackConfig, Neighborhood, Objective, _SINGLE, acc_loss,
                                   attack_sample, constrained_select, cost_key, joint_attack, keyed_rng,
                                   pass_rate_gate, probe, propose_candidates, random_noise_attack,
                                   single_target_attack, tier_of, update_operator)
from cascade_attack.cascade import CascadeSpec, run_cascade
from cascade_attack.errors import AttackError, ConfigError
from cascade_attack.zoo import (LinearBagModel, LinearDecider, LinearTaskParams, TableModel, ThresholdDecider,
                                make_linear_task, random_suffix)

from oracles import exhaustive_best, joint_fixture


def nb(vocab, slots=2, pool=64, subs=2, rounds=1):
    return Neighborhood(slots, rounds, pool, subs, tuple(vocab))


# ---------------------------------------------------------------- candidates


def test_no_substitutions_gives_incumbent_only():
    rng = np.random.default_rng(0)
    assert propose_candidates((2, 3), nb(range(2, 6), subs=0), rng) == [(2, 3)]


def test_candidate_counting_bound():
    rng = np.random.default_rng(0)
    cands = propose_candidates((0, 1), nb(range(4), pool=16, subs=2), rng)
    assert len(cands) == len(set(cands)) == 16
    assert cands[0] == (0, 1)
    assert all(sum(a != b for a, b in zip(c, (0, 1))) <= 2 for c in cands)


def test_candidates_large_ball_rejection_sampling():
    rng = np.random.default_rng(1)
    inc = tuple(range(10))
    cands = propose_candidates(inc, nb(range(200), slots=10, pool=50, subs=3), rng)
    assert len(set(cands)) == 50 and cands[0] == inc
    assert all(sum(a != b for a, b in zip(c, inc)) <= 3 for c in cands)


def test_candidates_deterministic_and_vocab_checked():
    a = propose_candidates((2, 3), nb(range(2, 9), pool=10), np.random.default_rng(4))
    b = propose_candidates((2, 3), nb(range(2, 9), pool=10), np.random.default_rng(4))
    assert a == b
    with pytest.raises(ConfigError):
        propose_candidates((2, 3), nb(()), np.random.default_rng(0))


# ---------------------------------------------------------------- update operator


def test_constant_objective_returns_incumbent():
    seg, traj = update_operator((4, 5), lambda s: (1.0,), nb(range(2, 10)), 5, np.random.default_rng(0))
    assert seg == (4, 5) and traj == [(1.0,)] * 6


def test_length_one_full_pool_matches_exhaustive():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(8, 3))
    model = LinearBagModel(w)
    x, y = (0, 1), 0
    spec = CascadeSpec([model, model], [ThresholdDecider(0.5)])
    fn = lambda s: (acc_loss(spec, x + s, y, (1,)),)
    seg, _ = update_operator((0,), fn, nb(range(8), slots=1, pool=8, subs=1), 1, np.random.default_rng(0))
    assert fn(seg) == exhaustive_best(fn, range(8), 1)


def test_trajectory_never_worsens_greedy_and_genetic():
    spec, corpus = make_linear_task(LinearTaskParams(n_samples=6), seed=1)
    vocab = corpus.attack_vocab
    for backend in ("greedy", "genetic"):
        for (x, y) in corpus.samples:
            fn = lambda s: (acc_loss(spec, x + s, y, (1,)),)
            seg, traj = update_operator(random_suffix(vocab, 3, 0), fn, nb(vocab, slots=3, pool=16), 6,
                                        np.random.default_rng(0), backend)
            assert all(b >= a for a, b in zip(traj, traj[1:]))
            assert fn(seg) == traj[-1]


def test_update_budget_and_errors():
    with pytest.raises(ConfigError):
        update_operator((1,), lambda s: (0.0,), nb(range(3), slots=1), 0, np.random.default_rng(0))

    def boom(s):
        if s != (1,):
            raise RuntimeError("model down")
        return (0.0,)

    with pytest.raises(AttackError) as exc:
        update_operator((1,), boom, nb(range(3), slots=1, pool=3, subs=1), 1, np.random.default_rng(0))
    assert exc.value.candidate is not None


def test_objective_kinds():
    spec, samples, vocab = joint_fixture()
    x, y = samples[0]
    assert Objective("acc_loss").evaluate(spec, x + (3, 3), y, (1,))[0] == 0.5
    assert Objective("cost_escalation").evaluate(spec, x + (6, 6), y, (1,))[0] == 1.0
    assert Objective("acc_loss", "cross_entropy").evaluate(spec, x, y, (1,))[0] > 0


# ---------------------------------------------------------------- tiers and gate


def test_tiers_all_preserving_pick_max_or_min():
    preds = [{1: 2}, {1: 2}, {1: 2}]
    cv = [(0.0, 0.1), (1.0, 0.0), (1.0, 0.3)]
    assert constrained_select("abc", cv, preds, {1: 2}, 0, MAXIMIZE) == ("c", "i")
    assert constrained_select("abc", cv, preds, {1: 2}, 0, MINIMIZE) == ("a", "i")


def test_tier_ii_with_table_models():
    # the snapshot is wrong (2 != 0); candidate b keeps it wrong with a different label
    ctx = (2, 3)
    table = {ctx + (4,): (0, 6.0), ctx + (5,): (1, 6.0), ctx + (6,): (0, 6.0)}
    f1 = TableModel(table, 0, 3, 8)
    spec = CascadeSpec([f1, TableModel({}, 0, 3, 8)], [ThresholdDecider(0.5, vocab_size=8)])
    cands = [(4,), (5,), (6,)]
    probed = [probe(spec, ctx + c, (1,)) for c in cands]
    preds = [{1: p[1][0].prediction} for p in probed]
    cv = [cost_key(spec, p) for p in probed]
    assert constrained_select(cands, cv, preds, {1: 2}, 0) == ((5,), "ii")


def test_tier_iii_fallback_and_ties():
    preds = [{1: 0}, {1: 0}]
    assert constrained_select("ab", [(1.0, 0.0), (1.0, 0.0)], preds, {1: 2}, 0) == ("a", "iii")
    assert tier_of({1: 0, 2: 1}, {1: 0, 2: 1}, 0) == "i"
    assert tier_of({1: 1, 2: 2}, {1: 2, 2: 0}, 0) == "ii"


def test_gate_endpoints():
    for sid in range(200):
        assert pass_rate_gate(1.0, True, 0, sid, 1) == MAXIMIZE
        assert pass_rate_gate(0.0, True, 0, sid, 1) == MINIMIZE
        assert pass_rate_gate(0.0, False, 0, sid, 1) == MAXIMIZE
    with pytest.raises(ConfigError):
        pass_rate_gate(1.2, True, 0, 0, 1)


def test_gate_deterministic_per_key():
    a = [pass_rate_gate(0.5, True, 3, s, 2) for s in range(100)]
    assert a == [pass_rate_gate(0.5, True, 3, s, 2) for s in range(100)]
    assert a != [pass_rate_gate(0.5, True, 3, s, 3) for s in range(100)]


# ---------------------------------------------------------------- single-target attacks


def test_config_validation_lists_problems():
    with pytest.raises(ConfigError) as exc:
        AttackConfig(mode="bogus", rounds=0, pass_rate=2.0, attack_vocab=(2,))
    assert len(exc.value.problems) == 3
    spec, samples, vocab = joint_fixture()
    with pytest.raises(ConfigError):
        single_target_attack(*samples[0], spec, AttackConfig("single_acc", target_stages=(2,), attack_vocab=vocab))


def test_single_cost_unattackable_decider_keeps_initial_segments():
    spec, samples, vocab = joint_fixture()
    blind = CascadeSpec(spec.stages, (ThresholdDecider(0.5, vocab_size=12),), spec.vocab)
    # f^1 only reacts to token 3; without it the decider sees the same margin
    vocab = (2, 4, 5, 6, 7)
    cfg = AttackConfig("single_cost", rounds=1, iterations=3, suffix_slots=2, pool_size=8, attack_vocab=vocab, seed=4)
    x, y = samples[0]
    xp, rep = single_target_attack(x, y, blind, cfg, sample_id=9)
    expected = ()
    for seg_no in range(2):
        expected += random_suffix(vocab, 2, keyed_rng(4, 9, seg_no + 1, _SINGLE))
    assert xp == x + expected
    assert all(len(set(r["trajectory"])) == 1 for r in rep.per_round)


def test_single_acc_picks_dominant_token():
    w = np.zeros((8, 3))
    w[2, 0] = 1.0
    w[5, 1] = 3.0
    w[6, 1] = 0.5
    w[7, 2] = 0.25
    f1 = LinearBagModel(w)
    spec = CascadeSpec([f1, f1], [ThresholdDecider(0.5)])
    cfg = AttackConfig("single_acc", rounds=1, iterations=1, suffix_slots=1, pool_size=8, substitutions=1,
                       attack_vocab=range(3, 8))
    xp, rep = single_target_attack((2,), 0, spec, cfg)
    best = max(range(3, 8), key=lambda t: acc_loss(spec, (2, t), 0, (1,)))
    assert best == 5 and xp[1] == 5
    assert f1.predict(xp).prediction != 0


def test_dm_flip_matches_achievability():
    rng = np.random.default_rng(3)
    V, C = 10, 2
    w = np.zeros((V, C))
    w[6:10] = rng.normal(size=(4, C)) * 2
    dw = np.zeros(V)
    dw[2], dw[3] = 1.5, -1.5
    f1 = LinearBagModel(w)
    g1 = LinearDecider(dw, bias=0.25, threshold=0.5, margin_weight=0.0)
    spec = CascadeSpec([f1, LinearBagModel(w)], [g1])
    vocab = (2, 3, 4, 5)
    cfg = AttackConfig("dm_flip", rounds=1, iterations=2, suffix_slots=1, pool_size=4, substitutions=1,
                       attack_vocab=vocab)
    hits = 0
    for sid in range(30):
        x = tuple(int(t) for t in rng.integers(6, 10, size=3))
        y = int(rng.integers(0, C))
        want = 1 if f1.predict(x).prediction == y else 0
        achievable = any(g1.decide(x + d, f1.predict(x + d))[0] == want for d in itertools.product(vocab, repeat=2))
        xp, _ = single_target_attack(x, y, spec, cfg, sid)
        got = g1.decide(xp, f1.predict(xp))[0]
        if achievable:
            assert got == want
            hits += 1
    assert hits > 0


# ---------------------------------------------------------------- joint attack


def test_joint_suffix_insensitive_models():
    spec, samples, _ = joint_fixture()
    vocab = (2, 4, 5, 7)  # none of these tokens affects f^1 or g^1
    cfg = AttackConfig("joint", rounds=1, iterations=1, suffix_slots=2, pool_size=16, attack_vocab=vocab, seed=2)
    x, y = samples[0]
    xp, rep = joint_attack(x, y, spec, cfg, 0)
    assert len(xp) == len(x) + 4 and xp[:len(x)] == x
    for entry in rep.per_round:
        assert entry["objective_before"] == entry["objective_after"]


def test_joint_planted_fixture_exhaustive():
    spec, samples, vocab = joint_fixture()
    x, y = samples[0]
    f1, g1 = spec.stages[0], spec.deciders[0]
    both = []
    for fs in itertools.product(vocab, repeat=2):
        for gs in itertools.product(vocab, repeat=2):
            xp = x + fs + gs
            o = f1.predict(xp)
            if o.prediction != y and g1.decide(xp, o)[0] == 1 and f1.predict(x + fs).prediction != y:
                both.append(fs + gs)
    cfg = AttackConfig("joint", rounds=1, iterations=2, suffix_slots=2, pool_size=36, attack_vocab=vocab, seed=0)
    xp, rep = joint_attack(x, y, spec, cfg, 0)
    o = f1.predict(xp)
    assert o.prediction != y and g1.decide(xp, o)[0] == 1
    assert xp[len(x):] in both
    g = [e for e in rep.per_round if e["phase"] == "g"][0]
    assert g["tier"] in ("i", "ii") and g["direction"] == MAXIMIZE


def test_joint_damage_preservation_and_determinism():
    spec, corpus = make_linear_task(LinearTaskParams(n_samples=12), seed=3)
    cfg = AttackConfig("joint", rounds=2, iterations=3, suffix_slots=2, pool_size=24, pass_rate=0.5,
                       attack_vocab=corpus.attack_vocab, seed=5)
    f1 = spec.stages[0]
    for sid, (x, y) in enumerate(corpus.samples):
        xp, rep = joint_attack(x, y, spec, cfg, sid)
        again = joint_attack(x, y, spec, cfg, sid)
        assert again[0] == xp and again[1].to_dict() == rep.to_dict()
        assert len(xp) - len(x) == cfg.neighborhood.total_length and xp[:len(x)] == x
        d = xp[len(x):]
        for r in range(cfg.rounds):
            snap = f1.predict(x + d[:4 * r + 2]).prediction
            after = f1.predict(x + d[:4 * r + 4]).prediction
            tier = rep.per_round[2 * r + 1]["tier"]
            if tier == "i":
                assert after == snap
            elif tier == "ii" and snap != y:
                assert after != y


def test_pass_rate_monotone_p1_vs_p0():
    spec, corpus = make_linear_task(LinearTaskParams(n_samples=20), seed=4)
    rates = {}
    for p in (0.0, 1.0):
        cfg = AttackConfig("joint", rounds=1, iterations=3, suffix_slots=2, pool_size=24, pass_rate=p,
                           attack_vocab=corpus.attack_vocab, seed=1)
        taus = [run_cascade(spec, attack_sample(x, y, spec, cfg, k)[0]).stopping_index
                for k, (x, y) in enumerate(corpus.samples)]
        rates[p] = sum(t == 2 for t in taus) / len(taus)
    assert rates[1.0] >= rates[0.0]


def test_random_noise_length_and_report():
    spec, samples, vocab = joint_fixture()
    cfg = AttackConfig("single_acc", rounds=2, suffix_slots=2, attack_vocab=vocab)
    xp, rep = random_noise_attack(*samples[0], spec, cfg, 3)
    assert len(xp) - len(samples[0][0]) == 8
    assert rep.to_dict()["suffix_text"] == spec.vocab.decode(xp[len(samples[0][0]):])


def test_genetic_backend_runs_joint():
    spec, samples, vocab = joint_fixture()
    cfg = AttackConfig("joint", rounds=1, iterations=3, suffix_slots=2, pool_size=12, backend="genetic",
                       attack_vocab=vocab, seed=0)
    xp, rep = joint_attack(*samples[0], spec, cfg, 0)
    assert len(xp) == len(samples[0][0]) + 4
    assert all(b >= a for a, b in zip(rep.per_round[0]["trajectory"], rep.per_round[0]["trajectory"][1:]))
