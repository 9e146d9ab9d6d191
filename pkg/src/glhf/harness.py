"""Experiment plumbing behind the command line: seeded runs, budget parity,
schema-stable CSV traces, summary statistics and comparison tables.

Seed scheme for a cell ``(problem, dim, seed)``: the shift is sampled with
``seed``, the initial population with ``default_rng([seed, 1])`` and the
algorithm's own stream is ``default_rng([seed, 2])``.  Every algorithm in a
comparison therefore starts from the same population on the same instance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from .benchmarks import Problem
from .gpom import GpomConfig, GpomParams, gpom_rollout

log = logging.getLogger(__name__)

TRACE_HEADER = ("seed", "generation", "best", "mean")
ABLATION_MODES = ("full", "no_lmm", "no_lcm", "no_mask", "untrained")


class ConfigError(ValueError):
    pass


@dataclass
class RunRecord:
    algorithm: str
    problem: str
    dim: int
    seed: int
    best: list
    mean: list
    evals: int
    wall_time: float = 0.0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def final_best(self):
        return self.best[-1]

    @property
    def generations(self):
        return len(self.best)


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def worker_count(cells):
    raw = os.environ.get("GLHF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GLHF_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, cells))


def run_cells(fn, cells):
    """Apply ``fn`` to each cell, in parallel when GLHF_THREADS allows; order is kept."""
    cells = list(cells)
    n = worker_count(len(cells)) if cells else 1
    if n == 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, cells))


def seeded_instance(fid, dim, seed, n):
    prob = Problem.sample(fid, dim, seed)
    X0 = prob.initial_population(n, np.random.default_rng([seed, 1]))
    return prob, X0, np.random.default_rng([seed, 2])


# ---------------------------------------------------------------- single runs


def run_gpom(params, gcfg, fid, dim, n, gens, seed, name="gpom"):
    prob, X0, rng = seeded_instance(fid, dim, seed, n)
    t0 = time.perf_counter()
    X0_evals = prob.eval_budget_used
    trace, _ = gpom_rollout(X0, prob, params, gcfg, gens, rng)
    evals = prob.eval_budget_used - X0_evals - n
    best = list(np.minimum.accumulate(trace.best))
    return RunRecord(name, fid, dim, seed, best, list(trace.mean), evals, time.perf_counter() - t0)


def run_baseline(name, fid, dim, n, gens, seed, de_cfg=None, es_cfg=None):
    prob, X0, rng = seeded_instance(fid, dim, seed, n)
    t0 = time.perf_counter()
    best, mean, _ = bl.run_baseline(name, prob, X0, gens, rng, de_cfg, es_cfg)
    evals = prob.eval_budget_used - n
    return RunRecord(name, fid, dim, seed, best, mean, evals, time.perf_counter() - t0)


def generations_for_budget(algorithm, budget, n):
    """Generations that fit in ``budget`` objective evaluations (initial population excluded)."""
    per_gen = 2 * n if algorithm.startswith("gpom") else n
    gens = budget // per_gen
    if gens < 1:
        raise ConfigError(f"budget {budget} is below one {algorithm} generation ({per_gen} evaluations)")
    return gens


def ablation_setup(mode, params, gcfg, untrained_seed=0, init="normal"):
    """Parameters and config for one ablation column.

    UNTRAINED draws fresh parameters from ``untrained_seed`` with the given
    init scheme; with the training seed this is exactly the pre-training model.
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    cfg = GpomConfig(**{**_cfg_fields(gcfg), "mode": "full" if mode == "untrained" else mode})
    if mode == "untrained":
        return GpomParams.init(cfg, np.random.default_rng(untrained_seed), init), cfg
    return params, cfg


def _cfg_fields(gcfg):
    return {k: getattr(gcfg, k) for k in gcfg.__dataclass_fields__}


# ---------------------------------------------------------------- statistics


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("no values to summarize")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(v.size),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "iqr": float(q3 - q1),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "max": float(v.max()),
    }


def is_tie(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300) or a == b


def win_tie_loss(ours, theirs, tol=1e-8):
    """Counts over paired values (lower is better); ``tol`` is relative."""
    if len(ours) != len(theirs):
        raise ConfigError("win/tie/loss needs paired results")
    w = t = l = 0
    for a, b in zip(ours, theirs):
        if is_tie(a, b, tol):
            t += 1
        elif a < b:
            w += 1
        else:
            l += 1
    return {"win": w, "tie": t, "loss": l}


def final_bests(records, algorithm, problem):
    rows = sorted((r for r in records if r.algorithm == algorithm and r.problem == problem), key=lambda r: r.seed)
    return [r.seed for r in rows], [r.final_best for r in rows]


def comparison_report(records, reference, tie_tol=1e-8):
    """Per-(algorithm, problem) stats plus win/tie/loss of ``reference`` against every other algorithm.

    Win/tie/loss is reported twice: per (problem, seed) pair of final bests,
    and per problem on the medians.
    """
    algorithms = list(dict.fromkeys(r.algorithm for r in records))
    problems = list(dict.fromkeys(r.problem for r in records))
    stats = {a: {p: summarize(final_bests(records, a, p)[1]) for p in problems} for a in algorithms}
    evals = {a: {p: sorted({r.evals for r in records if r.algorithm == a and r.problem == p}) for p in problems}
             for a in algorithms}  # fmt: skip
    versus = {}
    for other in algorithms:
        if other == reference:
            continue
        paired = {"win": 0, "tie": 0, "loss": 0}
        medians = {"win": 0, "tie": 0, "loss": 0}
        for p in problems:
            s_ref, ours = final_bests(records, reference, p)
            s_oth, theirs = final_bests(records, other, p)
            if s_ref != s_oth:
                raise ConfigError(f"{reference} and {other} ran different seeds on {p}")
            for k, v in win_tie_loss(ours, theirs, tie_tol).items():
                paired[k] += v
            for k, v in win_tie_loss([stats[reference][p]["median"]], [stats[other][p]["median"]], tie_tol).items():
                medians[k] += v
        versus[other] = {"per_seed": paired, "per_problem_median": medians}
    return {"reference": reference, "tie_tol": tie_tol, "stats": stats, "evals": evals, "versus": versus}


# ---------------------------------------------------------------- files


def fmt(x):
    return format(float(x), ".17g")


def write_trace_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in records:
            for g, (b, m) in enumerate(zip(r.best, r.mean), start=1):
                w.writerow((r.seed, g, fmt(b), fmt(m)))


def read_trace_csv(path):
    """Returns ``{seed: (best list, mean list)}``; raises ConfigError on a foreign header."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = tuple(next(rows, ()))
        if header != TRACE_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}")
        for seed, gen, best, mean in rows:
            b, m = out.setdefault(int(seed), ([], []))
            if int(gen) != len(b) + 1:
                raise ConfigError(f"{path}: generations out of order for seed {seed}")
            b.append(float(best))
            m.append(float(mean))
    return out


def trace_summary(path):
    """Final-best statistics recomputed from a trace CSV."""
    traces = read_trace_csv(path)
    return summarize([traces[s][0][-1] for s in sorted(traces)])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("algorithm", "problem", "median", "q1", "q3", "mean", "std", "n"))
        for a, per in report["stats"].items():
            for p, s in per.items():
                w.writerow((a, p, fmt(s["median"]), fmt(s["q1"]), fmt(s["q3"]), fmt(s["mean"]), fmt(s["std"]), s["n"]))


def markdown_table(report):
    algorithms = list(report["stats"])
    problems = list(next(iter(report["stats"].values())))
    lines = ["| problem | " + " | ".join(algorithms) + " |", "|---" * (len(algorithms) + 1) + "|"]
    for p in problems:
        cells = [f"{report['stats'][a][p]['median']:.3e} ({report['stats'][a][p]['iqr']:.2e})" for a in algorithms]
        lines.append(f"| {p} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_matrix_csv(path, M):
    M = np.atleast_2d(M)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([fmt(v) for v in row])


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def plot_traces(path, series, title=""):
    """Static SVG of best-so-far curves (log scale); ``series`` maps label -> list of traces."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping %s", path)
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, traces in series.items():
        med = np.median(np.array(traces), axis=0)
        ax.plot(np.arange(1, med.size + 1), np.maximum(med, 1e-300), label=label)
    ax.set_yscale("log")
    ax.set_xlabel("generation")
    ax.set_ylabel("median best fitness")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


def finite_or_raise(records):
    for r in records:
        if not all(math.isfinite(v) for v in r.best):
            raise FloatingPointError(f"non-finite fitness in {r.algorithm} on {r.problem}, seed {r.seed}")
