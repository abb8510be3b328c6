"""Exact routing analysis: stopping-stage partition, error decomposition, gap.

Everything is computed from integer counts with :class:`fractions.Fraction`
so the decomposition identities hold with equality; floats appear only in
``to_dict``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .cascade import CascadeSpec, ExecutionTrace, run_cascade
from .errors import IntegrityError


@dataclass(frozen=True)
class RoutingRecord:
    sample_id: int
    stop_stage: int
    stage_correct: dict  # stage -> bool, every evaluated stage plus the final stage
    final_stage_correct: bool
    n_stages: int

    @property
    def cascade_correct(self) -> bool:
        return self.stage_correct[self.stop_stage]

    def to_dict(self):
        return {"sample_id": self.sample_id, "stop_stage": self.stop_stage, "n_stages": self.n_stages,
                "stage_correct": {str(k): v for k, v in sorted(self.stage_correct.items())},
                "final_stage_correct": self.final_stage_correct}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sample_id"], d["stop_stage"], {int(k): v for k, v in d["stage_correct"].items()},
                   d["final_stage_correct"], d["n_stages"])


def record_from_trace(sample_id, trace: ExecutionTrace, y, final_prediction) -> RoutingRecord:
    correct = {r.stage: r.output.prediction == y for r in trace.per_stage}
    final_ok = final_prediction == y
    correct[trace.n_stages] = final_ok
    return RoutingRecord(sample_id, trace.stopping_index, correct, final_ok, trace.n_stages)


def routing_stats(samples, spec: CascadeSpec, inputs=None, sample_ids=None) -> list[RoutingRecord]:
    """One record per ``(x, y)`` sample; ``inputs`` replaces x (e.g. attacked queries).

    The final stage is evaluated on every input, outside the cascade, so its
    error is known on every routed subset.
    """
    samples = list(getattr(samples, "samples", samples))
    xs = [x for x, _ in samples] if inputs is None else list(inputs)
    if len(xs) != len(samples):
        raise IntegrityError(f"{len(xs)} inputs for {len(samples)} samples")
    ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    out = []
    for sid, x, (_, y) in zip(ids, xs, samples):
        trace = run_cascade(spec, x)
        final_pred = trace.final_output if trace.stopping_index == spec.n_stages else spec.stages[-1].predict(x).prediction
        out.append(record_from_trace(sid, trace, y, final_pred))
    return out


def _ratio(a, b):
    return Fraction(a, b) if b else Fraction(0)


@dataclass
class DecompositionReport:
    n: int
    n_stages: int
    count_S: list
    count_stage_err: list  # |S_i and f^i wrong|
    count_final_err: list  # |S_i and f^l wrong|
    cascade_errors: int  # direct count
    final_errors: int  # direct count
    pr_S: list = field(default_factory=list)
    cond_err_stage: list = field(default_factory=list)
    cond_err_final: list = field(default_factory=list)
    pr_A_cas: Fraction = Fraction(0)
    pr_final_err: Fraction = Fraction(0)
    gap: Fraction = Fraction(0)
    per_term: list = field(default_factory=list)

    @property
    def cond_gap(self):
        return [a - b for a, b in zip(self.cond_err_stage, self.cond_err_final)]

    def to_dict(self):
        f = float
        return {
            "n": self.n, "n_stages": self.n_stages, "count_S": self.count_S,
            "count_stage_err": self.count_stage_err, "count_final_err": self.count_final_err,
            "cascade_errors": self.cascade_errors, "final_errors": self.final_errors,
            "pr_S": [f(v) for v in self.pr_S], "cond_err_stage": [f(v) for v in self.cond_err_stage],
            "cond_err_final": [f(v) for v in self.cond_err_final], "pr_A_cas": f(self.pr_A_cas),
            "pr_final_err": f(self.pr_final_err), "gap": f(self.gap), "per_term": [f(v) for v in self.per_term],
        }


def decomposition(records) -> DecompositionReport:
    records = list(records)
    if not records:
        raise IntegrityError("decomposition needs at least one record")
    l = records[0].n_stages
    n = len(records)
    cS, cE, cF = [0] * l, [0] * l, [0] * l
    cascade_errors = final_errors = 0
    for r in records:
        i = r.stop_stage - 1
        cS[i] += 1
        cE[i] += not r.stage_correct[r.stop_stage]
        cF[i] += not r.final_stage_correct
        cascade_errors += not r.cascade_correct
        final_errors += not r.final_stage_correct
    rep = DecompositionReport(n, l, cS, cE, cF, cascade_errors, final_errors)
    rep.pr_S = [Fraction(c, n) for c in cS]
    rep.cond_err_stage = [_ratio(e, c) for e, c in zip(cE, cS)]
    rep.cond_err_final = [_ratio(e, c) for e, c in zip(cF, cS)]
    rep.pr_A_cas = sum((p * e for p, e in zip(rep.pr_S, rep.cond_err_stage)), Fraction(0))
    rep.pr_final_err = sum((p * e for p, e in zip(rep.pr_S, rep.cond_err_final)), Fraction(0))
    rep.per_term = [rep.pr_S[i] * (rep.cond_err_stage[i] - rep.cond_err_final[i]) for i in range(l - 1)]
    rep.gap = sum(rep.per_term, Fraction(0))
    return rep


@dataclass
class MechanismReport:
    gap_clean: Fraction
    gap_adv: Fraction
    change: Fraction
    routing_shift: list
    conditional_gap: list
    cross: list

    @property
    def totals(self):
        return sum(self.routing_shift, Fraction(0)), sum(self.conditional_gap, Fraction(0)), sum(self.cross, Fraction(0))

    def to_dict(self):
        rs, cg, cx = self.totals
        return {"gap_clean": float(self.gap_clean), "gap_adv": float(self.gap_adv), "change": float(self.change),
                "routing_shift": [float(v) for v in self.routing_shift],
                "conditional_gap": [float(v) for v in self.conditional_gap],
                "cross": [float(v) for v in self.cross],
                "routing_shift_total": float(rs), "conditional_gap_total": float(cg), "cross_total": float(cx)}


def gap_shift(clean_records, adv_records) -> MechanismReport:
    """Attribute the change in gap to routing shift, conditional gap change and their interaction.

    With P, D the clean routing probability and conditional gap at stage i
    and P', D' their attacked values:
    P'D' - PD = (P'-P)D + P(D'-D) + (P'-P)(D'-D).
    """
    clean_records, adv_records = list(clean_records), list(adv_records)
    ids_c = sorted(r.sample_id for r in clean_records)
    ids_a = sorted(r.sample_id for r in adv_records)
    if ids_c != ids_a or len(set(ids_c)) != len(ids_c):
        raise IntegrityError("clean and adversarial records must cover the same sample ids exactly once")
    c, a = decomposition(clean_records), decomposition(adv_records)
    if c.n_stages != a.n_stages:
        raise IntegrityError("clean and adversarial records come from cascades of different depth")
    routing, cond, cross = [], [], []
    for i in range(c.n_stages - 1):
        dP = a.pr_S[i] - c.pr_S[i]
        D, D2 = c.cond_gap[i], a.cond_gap[i]
        routing.append(dP * D)
        cond.append(c.pr_S[i] * (D2 - D))
        cross.append(dP * (D2 - D))
    gap_c = c.pr_A_cas - c.pr_final_err
    gap_a = a.pr_A_cas - a.pr_final_err
    return MechanismReport(gap_c, gap_a, gap_a - gap_c, routing, cond, cross)


def format_decomposition(rep: DecompositionReport) -> str:
    rows = [("stage", "Pr[S_i]", "err f^i|S_i", "err f^l|S_i", "term")]
    for i in range(rep.n_stages):
        term = f"{float(rep.per_term[i]):+.4f}" if i < rep.n_stages - 1 else "-"
        rows.append((str(i + 1), f"{float(rep.pr_S[i]):.4f}", f"{float(rep.cond_err_stage[i]):.4f}",
                     f"{float(rep.cond_err_final[i]):.4f}", term))
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.append(f"Pr[A_cas]={float(rep.pr_A_cas):.4f}  Pr[f^l wrong]={float(rep.pr_final_err):.4f}  "
                 f"gap={float(rep.gap):+.4f}")
    return "\n".join(lines)


def format_mechanisms(m: MechanismReport) -> str:
    rows = [("stage", "routing", "cond-gap", "cross")]
    for i in range(len(m.routing_shift)):
        rows.append((str(i + 1), f"{float(m.routing_shift[i]):+.4f}", f"{float(m.conditional_gap[i]):+.4f}",
                     f"{float(m.cross[i]):+.4f}"))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.append(f"gap clean={float(m.gap_clean):+.4f}  adv={float(m.gap_adv):+.4f}  change={float(m.change):+.4f}")
    return "\n".join(lines)
