"""Experiment orchestration: build, attack, analyze, defend, persist.

Every output file is written to a temporary sibling and renamed into place.
Workers only compute; results are collected in input order, so the
experiment directory does not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

from . import analysis, metrics
from .attack import AttackConfig, attack_sample, random_noise_attack
from .cascade import CascadeSpec, ExecutionTrace, run_cascade
from .config import ExperimentConfig, cascade_from_dict, cascade_to_dict, load_cascade, task_params
from .defenses import FilterConfig, PerplexityReference, SmoothingConfig, defense_eval, make_filter
from .errors import ConfigError, IntegrityError
from .zoo import SyntheticCorpus, make_linear_task, make_planted_cascade

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# io helpers


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2) + "\n")


def write_jsonl(path: Path, rows) -> None:
    write_atomic(path, "".join(json.dumps(r) + "\n" for r in rows))


def read_jsonl(path: Path) -> list:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# --------------------------------------------------------------------------
# building


def build_task(cfg: ExperimentConfig):
    """Cascade spec and corpus for ``cfg``."""
    try:
        if cfg.task is not None:
            params = task_params(cfg.task)
            if cfg.task["generator"] == "linear_task":
                return make_linear_task(params, cfg.seed)
            return make_planted_cascade(params, cfg.seed)
        base = Path(cfg.base_dir)
        if "path" in cfg.cascade:
            spec = load_cascade(base / cfg.cascade["path"])
        else:
            spec = cascade_from_dict(cfg.cascade, base)
        corpus = SyntheticCorpus.from_jsonl(base / cfg.corpus["path"], spec.vocab)
        return spec, corpus
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"cannot build task: {exc!r}") from exc


def resolve_attack_vocab(cfg: ExperimentConfig, spec: CascadeSpec, corpus: SyntheticCorpus) -> tuple:
    choice = cfg.attack.get("attack_vocab", "default")
    vocab = spec.vocab
    if choice == "default":
        if corpus.attack_vocab:
            return tuple(corpus.attack_vocab)
        choice = "all"
    if choice == "all":
        return tuple(range(2, len(vocab)))
    if choice == "punct":
        return tuple(i for i, s in enumerate(vocab.surfaces) if i >= 2 and not any(c.isalnum() for c in s))
    if isinstance(choice, list):
        missing = [s for s in choice if vocab.id_of(s) == vocab.unk_id]
        if missing:
            raise ConfigError("attack_vocab surfaces not in the vocabulary", missing[:10])
        return tuple(vocab.id_of(s) for s in choice)
    raise ConfigError(f"attack_vocab={choice!r} must be 'default', 'all', 'punct' or a list of surfaces")


# --------------------------------------------------------------------------
# per-sample work (module level so it pickles into worker processes)


def _evaluate_one(spec: CascadeSpec, item):
    sid, x, y, query_len = item
    trace = run_cascade(spec, x, query_len)
    final_pred = trace.final_output if trace.stopping_index == spec.n_stages else spec.stages[-1].predict(x).prediction
    return trace, analysis.record_from_trace(sid, trace, y, final_pred)


def _attack_one(spec: CascadeSpec, acfg: AttackConfig, random_baseline: bool, item):
    sid, x, y = item
    if random_baseline:
        return random_noise_attack(x, y, spec, acfg, sid)
    return attack_sample(x, y, spec, acfg, sid)


def trace_row(sid, trace: ExecutionTrace) -> dict:
    row = {"sample_id": sid}
    row.update(trace.to_dict())
    row["token_cost"] = metrics.normalized_token_cost(trace)
    return row


class Condition:
    """Traces, routing records and metrics of the corpus under one input set."""

    def __init__(self, name, spec, corpus, inputs, threads=1, reports=None):
        self.name = name
        self.inputs = list(inputs)
        self.reports = reports
        labels = corpus.labels
        items = [(k, x, y, len(cx)) for k, (x, y, cx) in enumerate(zip(self.inputs, labels, corpus.inputs))]
        results = parallel_map(partial(_evaluate_one, spec), items, threads)
        self.traces = [r[0] for r in results]
        self.records = [r[1] for r in results]
        self.metrics = metrics.metric_report(self.traces, labels, spec.n_stages)
        self.decomposition = analysis.decomposition(self.records)

    def outcomes(self):
        return [(t.final_output, t.stopping_index) for t in self.traces]

    def write(self, d: Path, clean: "Condition | None" = None) -> None:
        write_jsonl(d / "traces.jsonl", [trace_row(k, t) for k, t in enumerate(self.traces)])
        write_jsonl(d / "routing.jsonl", [r.to_dict() for r in self.records])
        write_json(d / "metrics.json", self.metrics.to_dict())
        write_json(d / "decomposition.json", self.decomposition.to_dict())
        if self.reports is not None:
            write_jsonl(d / "reports.jsonl", [r.to_dict() for r in self.reports])
        if clean is not None:
            write_json(d / "mechanisms.json", analysis.gap_shift(clean.records, self.records).to_dict())


def run_attack_condition(name, spec, corpus, acfg: AttackConfig, threads=1, random_baseline=False) -> Condition:
    items = [(k, x, y) for k, (x, y) in enumerate(corpus.samples)]
    results = parallel_map(partial(_attack_one, spec, acfg, random_baseline), items, threads)
    return Condition(name, spec, corpus, [r[0] for r in results], threads, [r[1] for r in results])


def condition_name(mode, p=None):
    return f"joint_p{p:.1f}" if mode == "joint" else mode


# --------------------------------------------------------------------------
# defenses


def _defense_items(entry: dict):
    kind = entry["kind"]
    if kind == "smoothing":
        sc = SmoothingConfig(entry.get("sigma", 0.35), entry.get("n_draws", 16), entry.get("seed", 0))
        yield kind, sc.sigma, 0, sc
        return
    for s in entry["strengths"]:
        yield kind, s, entry.get("trim", 0), FilterConfig(kind, s, entry.get("trim", 0), entry.get("cpt_direction", "above"))


def defense_rows(cfg: ExperimentConfig, spec, corpus, clean: Condition, joint: dict, threads=1) -> list[dict]:
    reference = PerplexityReference([spec.vocab.decode(x) for x in corpus.inputs])
    clean_out = clean.outcomes()
    rows = []
    for entry in cfg.defense:
        for kind, strength, trim, dcfg in _defense_items(entry):
            defense = dcfg if isinstance(dcfg, SmoothingConfig) else make_filter(dcfg, reference, spec.vocab)
            for p, cond in joint.items():
                flags = [a != c for a, c in zip(cond.outcomes(), clean_out)]
                res = defense_eval(corpus.inputs, cond.inputs, flags, defense, spec)
                rows.append({"kind": kind, "strength": strength, "trim": trim, "p": p, **res})
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    fields = ["kind", "strength", "trim", "p", "defense_success_rate", "over_defense_rate", "n_attacked_success", "n_clean"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# --------------------------------------------------------------------------
# summary


def _row_values(m: dict):
    return [m["task_metric"]["value"], m["normalized_token_cost"], m["simulated_time"], *m["pass_rates"]]


def render_summary(exp_dir: Path) -> str:
    exp_dir = Path(exp_dir)
    manifest = json.loads((exp_dir / "manifest.json").read_text(encoding="utf-8"))
    clean_m = json.loads((exp_dir / "clean" / "metrics.json").read_text(encoding="utf-8"))
    n_rho = len(clean_m["pass_rates"])
    header = ["Setting", "Performance", "Token cost", "Time cost"] + [f"Passrate_{i + 1}" for i in range(n_rho)] + ["Gap"]
    lines = [f"# Experiment summary (seed {manifest['seed']})", ""]
    if not manifest.get("deterministic", True):
        lines += ["Remote stages present: results are not deterministic.", ""]
    lines += ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]

    def fmt(vals):
        return [f"{vals[0] * 100:.2f}%", f"{vals[1]:.4f}", f"{vals[2]:.4f}"] + [f"{v * 100:.1f}%" for v in vals[3:]]

    base = _row_values(clean_m)
    clean_gap = json.loads((exp_dir / "clean" / "decomposition.json").read_text(encoding="utf-8"))["gap"]
    lines.append("| Initial | " + " | ".join(fmt(base)) + f" | {clean_gap:+.4f} |")
    for name in manifest["conditions"]:
        d = exp_dir / "attacks" / name
        m = json.loads((d / "metrics.json").read_text(encoding="utf-8"))
        gap = json.loads((d / "decomposition.json").read_text(encoding="utf-8"))["gap"]
        vals = _row_values(m)
        lines.append(f"| {name} | " + " | ".join(fmt(vals)) + f" | {gap:+.4f} |")
        lines.append("| &nbsp;&nbsp;Δ | " + " | ".join(metrics.delta_percent(a, b) for a, b in zip(vals, base)) + " | |")
    csv_path = exp_dir / "defense" / "defense.csv"
    if csv_path.exists():
        lines += ["", "## Defenses", "", "| Defense | Strength | Trim | p | DSR | ODR |", "|---|---|---|---|---|---|"]
        with open(csv_path, encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                lines.append(f"| {r['kind']} | {r['strength']} | {r['trim']} | {r['p']} | "
                             f"{float(r['defense_success_rate']) * 100:.2f}% | {float(r['over_defense_rate']) * 100:.2f}% |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# entry points


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=None, with_defense=True) -> Path:
    """Run the experiment described by ``cfg``; returns the experiment directory."""
    threads = cfg.threads if threads is None else threads
    out = cfg.resolve_output_dir(out_dir)
    spec, corpus = build_task(cfg)
    deterministic = all(getattr(m, "deterministic", True) for m in spec.stages)
    write_json(out / "config.json", cfg.to_dict())
    write_json(out / "cascade.json", cascade_to_dict(spec))
    write_atomic(out / "corpus.jsonl", "".join(json.dumps({"text": spec.vocab.decode(x), "label": y}) + "\n"
                                                for x, y in corpus.samples))

    log.info("clean pass over %d samples", len(corpus))
    clean = Condition("clean", spec, corpus, corpus.inputs, threads)
    clean.write(out / "clean")
    conditions, joint = [], {}
    if cfg.attacks_enabled:
        attack_vocab = resolve_attack_vocab(cfg, spec, corpus)
        for mode in cfg.modes:
            acfg = cfg.attack_config("single_acc" if mode == "random_noise" else mode, 1.0, attack_vocab)
            log.info("attack %s", mode)
            cond = run_attack_condition(mode, spec, corpus, acfg, threads, random_baseline=mode == "random_noise")
            cond.write(out / "attacks" / mode, clean)
            conditions.append(mode)
        for p in cfg.p_sweep:
            name = condition_name("joint", p)
            log.info("attack %s", name)
            cond = run_attack_condition(name, spec, corpus, cfg.attack_config("joint", p, attack_vocab), threads)
            cond.write(out / "attacks" / name, clean)
            conditions.append(name)
            joint[p] = cond
    write_json(out / "manifest.json", {"seed": cfg.seed, "conditions": conditions, "deterministic": deterministic,
                                       "n_samples": len(corpus), "n_stages": spec.n_stages})
    if with_defense and cfg.defense and joint:
        rows = defense_rows(cfg, spec, corpus, clean, joint, threads)
        write_atomic(out / "defense" / "defense.csv", rows_to_csv(rows))
    write_atomic(out / "summary.md", render_summary(out))
    return out


def analyze_dir(trace_dir: Path) -> str:
    """Decomposition (and mechanism attribution vs. ``clean``) for every routing file under a directory."""
    trace_dir = Path(trace_dir)
    files = sorted(trace_dir.rglob("routing.jsonl"))
    if not files:
        raise ConfigError(f"no routing.jsonl files under {trace_dir}")
    clean_path = trace_dir / "clean" / "routing.jsonl"
    clean = [analysis.RoutingRecord.from_dict(r) for r in read_jsonl(clean_path)] if clean_path.exists() else None
    chunks = []
    for f in files:
        records = [analysis.RoutingRecord.from_dict(r) for r in read_jsonl(f)]
        rep = analysis.decomposition(records)
        write_json(f.parent / "decomposition.json", rep.to_dict())
        chunks.append(f"== {f.parent.relative_to(trace_dir) if f.parent != trace_dir else '.'} ==\n"
                      + analysis.format_decomposition(rep))
        if clean is not None and f != clean_path:
            mech = analysis.gap_shift(clean, records)
            write_json(f.parent / "mechanisms.json", mech.to_dict())
            chunks.append(analysis.format_mechanisms(mech))
    return "\n\n".join(chunks) + "\n"


def load_suffixes(path: Path):
    """Per-sample suffix texts from an attack ``reports.jsonl``, or one shared suffix from a JSON file."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return {r["sample_id"]: r["suffix_text"] for r in read_jsonl(path)}
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "suffix_text" not in doc:
        raise ConfigError(f"{path}: expected a 'suffix_text' field")
    return doc["suffix_text"]


def transfer_eval(suffixes, spec: CascadeSpec, corpus: SyntheticCorpus, threads=1):
    """Append stored suffixes (no re-optimization) and compare against the clean baseline.

    ``suffixes`` is one text shared by all samples or a dict sample_id -> text.
    Returns (clean MetricReport, attacked MetricReport, delta dict, unknown-token count).
    """
    vocab = spec.vocab
    unknown = 0
    inputs = []
    for k, (x, _) in enumerate(corpus.samples):
        if isinstance(suffixes, dict):
            if k not in suffixes:
                raise IntegrityError(f"no stored suffix for sample {k}")
            text = suffixes[k]
        else:
            text = suffixes
        words = text.split()
        ids = vocab.encode(text)
        unknown += sum(1 for w, t in zip(words, ids) if t == vocab.unk_id and w != vocab.surfaces[0])
        inputs.append(tuple(x) + ids)
    if unknown:
        log.warning("%d suffix tokens not in the target vocabulary were mapped to <unk>", unknown)
    clean = Condition("clean", spec, corpus, corpus.inputs, threads)
    adv = Condition("transfer", spec, corpus, inputs, threads)
    cm, am = clean.metrics.to_dict(), adv.metrics.to_dict()
    names = ["performance", "token_cost", "time_cost"] + [f"passrate_{i + 1}" for i in range(len(cm["pass_rates"]))]
    delta = {n: metrics.delta_percent(a, b) for n, a, b in zip(names, _row_values(am), _row_values(cm))}
    return clean.metrics, adv.metrics, delta, unknown
