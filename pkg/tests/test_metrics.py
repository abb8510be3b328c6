import json

import numpy as np
import pytest

from cascade_attack.cascade import CascadeSpec, run_cascade
from cascade_attack.errors import IntegrityError
from cascade_attack.metrics import (MetricReport, accuracy, delta_percent, dm_confusion, exact_match, full_coverage,
                                    metric_report, normalized_token_cost, pass_rate, token_cost_from_row)
from cascade_attack.zoo import LinearBagModel, PlantedProfile, ThresholdDecider, make_planted_cascade

from oracles import random_cascade


def test_accuracy():
    assert accuracy([1, 2], [1, 2]) == 1.0
    assert accuracy([0, 1, 0, 0], [0, 1, 2, 3]) == 0.5
    with pytest.raises(IntegrityError):
        accuracy([], [])
    with pytest.raises(IntegrityError):
        accuracy([1], [1, 2])


@pytest.mark.parametrize("a,b,want", [("Paris.", "paris", 1), ("New York", "York", 0), (" a  b ", "a b", 1)])
def test_exact_match(a, b, want):
    assert exact_match(a, b) == want


def test_full_coverage():
    assert full_coverage("the dog ran to the park", {"dog", "park"}) == (1.0, 1)
    assert full_coverage("a dog", {"dog", "cat", "tree", "sun"}) == (0.25, 0)
    assert full_coverage("", {"dog"}) == (0.0, 0)


def _one_stage(scale, in_tokens=100, out_tokens=50):
    m = LinearBagModel(np.zeros((4, 2)), param_scale=scale, output_tokens=out_tokens)
    spec = CascadeSpec([m])
    return spec, run_cascade(spec, (2,) * in_tokens)


def test_normalized_token_cost_fixture():
    spec, t = _one_stage(3.0)
    assert normalized_token_cost(t, spec, 100) == pytest.approx(0.075, abs=1e-12)
    spec, t = _one_stage(0.0)
    assert normalized_token_cost(t, spec, 100) == 0.0
    with pytest.raises(IntegrityError):
        normalized_token_cost(t, spec, 0)


def test_token_cost_grows_with_tau():
    w = np.zeros((4, 2))
    stop = CascadeSpec([LinearBagModel(w, param_scale=1), LinearBagModel(w, param_scale=5)],
                       [ThresholdDecider(0.0, param_scale=0.1)])
    go = CascadeSpec(stop.stages, [ThresholdDecider(1.0, param_scale=0.1)])
    a, b = run_cascade(stop, (2, 3)), run_cascade(go, (2, 3))
    assert (a.stopping_index, b.stopping_index) == (1, 2)
    assert normalized_token_cost(b) > normalized_token_cost(a)


def test_token_cost_recomputed_from_jsonl_row():
    rng = np.random.default_rng(0)
    for _ in range(30):
        spec, samples = random_cascade(rng)
        for x, _ in samples:
            if not x:
                continue
            t = run_cascade(spec, x)
            row = json.loads(json.dumps(t.to_dict()))
            assert token_cost_from_row(row) == normalized_token_cost(t) == normalized_token_cost(t, spec)


def test_pass_rate():
    assert pass_rate([1, 1, 1], 2) == [0.0]
    assert pass_rate([3, 3], 3) == [1.0, 1.0]
    spec, corpus = make_planted_cascade(PlantedProfile.uniform(20, (0.5, 0.5), (0.6, 0.9)))
    taus = [run_cascade(spec, x).stopping_index for x in corpus.inputs]
    assert pass_rate(taus, 2) == [0.5]
    with pytest.raises(IntegrityError):
        pass_rate([], 2)


def test_dm_confusion_cells():
    spec, corpus = make_planted_cascade(PlantedProfile(20, (0.5, 0.5), ((0.6, 0.3), (0.9, 0.8))))
    traces = [run_cascade(spec, x) for x in corpus.inputs]
    cm = dm_confusion(traces, corpus.labels, 2)[0]
    # S_1: 6 right / 4 wrong stop; S_2: 3 right / 7 wrong escalate
    assert cm == {"correct_stop": 6, "wrong_stop": 4, "correct_escalate": 3, "wrong_escalate": 7}


def test_dm_confusion_sums_match_reach_counts():
    rng = np.random.default_rng(5)
    for _ in range(30):
        spec, samples = random_cascade(rng, n_inputs=10)
        traces = [run_cascade(spec, x) for x, _ in samples]
        cms = dm_confusion(traces, [y for _, y in samples], spec.n_stages)
        rho = [1.0] + pass_rate([t.stopping_index for t in traces], spec.n_stages)
        for i, cm in enumerate(cms):
            assert sum(cm.values()) == round(len(traces) * rho[i])


def test_report_roundtrip_and_delta():
    spec, corpus = make_planted_cascade(PlantedProfile.uniform(20, (0.5, 0.5), (0.6, 0.9)))
    traces = [run_cascade(spec, x) for x in corpus.inputs]
    rep = metric_report(traces, corpus.labels, 2)
    assert MetricReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
    assert delta_percent(0.269, 1.0) == "-73.1%"
    assert delta_percent(2.0, 1.0) == "+100.0%"
    assert delta_percent(1.0, 0.0) == "n/a"
