from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_attack.analysis import (RoutingRecord, decomposition, format_decomposition, format_mechanisms, gap_shift,
                                     routing_stats)
from cascade_attack.cascade import CascadeSpec
from cascade_attack.errors import IntegrityError
from cascade_attack.zoo import PlantedProfile, TableModel, make_planted_cascade

from oracles import prediction_only_fixture, random_cascade, routing_only_fixture


def planted(route, acc1, acc2, n=20, seed=0):
    return make_planted_cascade(PlantedProfile(n, route, (acc1, acc2)), seed)


def test_single_stage_all_stop_at_one():
    spec = CascadeSpec([TableModel({}, 1, 3, 6)])
    recs = routing_stats([((2,), 1), ((3,), 0)], spec)
    assert [r.stop_stage for r in recs] == [1, 1]
    assert decomposition(recs).gap == 0


def test_planted_route_counts():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.6), (0.9, 0.6))
    rep = decomposition(routing_stats(corpus, spec))
    assert rep.count_S == [10, 10]


def test_always_escalate_all_at_last_stage():
    spec, corpus = planted((0.0, 1.0), (0.5, 0.5), (0.5, 0.5))
    assert {r.stop_stage for r in routing_stats(corpus, spec)} == {2}


def test_gap_fixture_and_inverted():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.8), (0.9, 0.8))
    rep = decomposition(routing_stats(corpus, spec))
    assert rep.gap == Fraction(3, 20)
    spec, corpus = planted((0.5, 0.5), (0.9, 0.8), (0.6, 0.8))
    assert decomposition(routing_stats(corpus, spec)).gap < 0


def test_final_stage_evaluated_out_of_band():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.8), (0.9, 0.8))
    for (x, y), r in zip(corpus.samples, routing_stats(corpus, spec)):
        assert r.final_stage_correct == (spec.stages[-1].predict(x).prediction == y)


def _check_identities(rep, records):
    assert sum(rep.count_S) == len(records)
    assert rep.cascade_errors == sum(rep.count_stage_err)
    assert rep.final_errors == sum(rep.count_final_err)
    assert rep.pr_A_cas == Fraction(rep.cascade_errors, rep.n)
    assert rep.pr_final_err == Fraction(rep.final_errors, rep.n)
    assert rep.gap == rep.pr_A_cas - rep.pr_final_err
    assert sum(rep.pr_S) == 1


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identities_on_random_cascades(seed):
    spec, samples = random_cascade(np.random.default_rng(seed), n_inputs=12)
    recs = routing_stats(samples, spec)
    _check_identities(decomposition(recs), recs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attribution_complete_on_random_pairs(seed):
    rng = np.random.default_rng(seed)
    spec, samples = random_cascade(rng, n_inputs=12)
    if spec.n_stages < 2:
        return
    adv = [x + tuple(int(t) for t in rng.integers(0, spec.vocab_size, size=3)) for x, _ in samples]
    m = gap_shift(routing_stats(samples, spec), routing_stats(samples, spec, adv))
    rs, cg, cx = m.totals
    assert rs + cg + cx == m.change


def test_theorem_positive_gap_on_dominating_profiles():
    # the final stage is at least as good on every routed subset and strictly better on one
    for acc1 in [(0.5, 0.6), (0.7, 0.8), (0.6, 0.5)]:
        for better in (0.1, 0.2, 0.3):
            acc2 = (min(1.0, acc1[0] + better), acc1[1])
            spec, corpus = planted((0.5, 0.5), acc1, acc2)
            assert decomposition(routing_stats(corpus, spec)).gap > 0


def test_gap_shift_no_attack():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.8), (0.9, 0.8))
    recs = routing_stats(corpus, spec)
    m = gap_shift(recs, recs)
    assert m.change == 0 and all(v == 0 for v in m.routing_shift + m.conditional_gap + m.cross)


def test_gap_shift_routing_only():
    spec, samples = routing_only_fixture()
    clean = routing_stats(samples, spec)
    adv = routing_stats(samples, spec, [x + (11,) for x, _ in samples])
    assert [r.stage_correct[1] for r in clean] == [r.stage_correct[1] for r in adv]
    m = gap_shift(clean, adv)
    assert m.change > 0
    assert m.conditional_gap == [0] and m.cross == [0]
    assert m.routing_shift[0] == m.change


def test_gap_shift_prediction_only():
    spec, samples = prediction_only_fixture()
    clean = routing_stats(samples, spec)
    adv = routing_stats(samples, spec, [x + (11,) for x, _ in samples])
    assert [r.stop_stage for r in clean] == [r.stop_stage for r in adv]
    m = gap_shift(clean, adv)
    assert m.change > 0
    assert m.routing_shift == [0] and m.cross == [0]
    assert m.conditional_gap[0] == m.change


def test_gap_shift_unpaired():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.8), (0.9, 0.8))
    recs = routing_stats(corpus, spec)
    with pytest.raises(IntegrityError):
        gap_shift(recs, recs[:-1])


def test_record_roundtrip_and_formatting():
    spec, corpus = planted((0.5, 0.5), (0.6, 0.8), (0.9, 0.8))
    recs = routing_stats(corpus, spec)
    assert [RoutingRecord.from_dict(r.to_dict()) for r in recs] == recs
    text = format_decomposition(decomposition(recs))
    assert "gap=+0.1500" in text
    assert "change=+0.0000" in format_mechanisms(gap_shift(recs, recs))
    with pytest.raises(IntegrityError):
        decomposition([])
