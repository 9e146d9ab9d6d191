"""Command line: ``glhf {train,optimize,compare,ablate,dump,summarize}``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness as hx
from . import metatrain as mt
from .benchmarks import ALL_IDS
from .gpom import GpomConfig, draw_step, load_checkpoint, step_graph
from .population import Population

log = logging.getLogger("glhf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise hx.ConfigError(message)


def _ints(text):
    try:
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise hx.ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not out:
        raise hx.ConfigError("the seed list is empty")
    return out


def _names(text, allowed=None):
    out = [s.strip() for s in text.split(",") if s.strip()]
    if allowed is not None:
        bad = [s for s in out if s not in allowed]
        if bad:
            raise hx.ConfigError(f"unknown name(s) {bad}; expected some of {list(allowed)}")
    return out


def _load_model(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    params, gcfg, meta = load_checkpoint(path)
    return params, gcfg, meta


def _check_pop(n):
    if n < 4:
        raise hx.ConfigError("population size must be at least 4")


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- train


def cmd_train(args):
    cfg_obj = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg_obj = json.load(fh)
    model_obj = dict(cfg_obj.pop("model", {}))
    preset = model_obj.pop("preset", None)
    gcfg = GpomConfig.from_preset(preset, **model_obj) if preset else GpomConfig(**model_obj)
    unknown = set(cfg_obj) - set(mt.TrainConfig.__dataclass_fields__)
    if unknown:
        raise hx.ConfigError(f"unknown training keys {sorted(unknown)}")
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    if args.epochs is not None:
        cfg_obj["epochs"] = args.epochs
    cfg = mt.TrainConfig.from_dict(cfg_obj)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))

    def progress(epoch, recs):
        print(f"epoch {epoch}/{cfg.epochs}: mean loss {mt.epoch_mean(recs):.6g}", flush=True)

    t0 = time.perf_counter()
    _, records = mt.train(cfg, gcfg, checkpoint_path=args.out, loss_csv=loss_csv, progress=progress)
    if records:
        last = mt.epoch_mean([r for r in records if r.epoch == cfg.epochs])
        print(f"final epoch mean loss {last:.6g} ({time.perf_counter() - t0:.1f} s)")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- optimize


def _gpom_config(gcfg, mode):
    return GpomConfig(**{**hx._cfg_fields(gcfg), "mode": mode})


def cmd_optimize(args):
    params, gcfg, _ = _load_model(args.model)
    _check_pop(args.pop)
    if args.gens < 1:
        raise hx.ConfigError("--gens must be at least 1")
    seeds = _ints(args.seeds)
    gcfg = _gpom_config(gcfg, args.mode)
    out = _outdir(args.out)
    recs = hx.run_cells(lambda s: hx.run_gpom(params, gcfg, args.problem, args.dim, args.pop, args.gens, s), seeds)
    hx.finite_or_raise(recs)
    hx.write_trace_csv(out / "trace.csv", recs)
    summary = {
        "problem": args.problem,
        "dim": args.dim,
        "pop": args.pop,
        "gens": args.gens,
        "seeds": seeds,
        "evals_per_run": recs[0].evals,
        "final_best": hx.summarize([r.final_best for r in recs]),
        "per_seed_final_best": {str(r.seed): r.final_best for r in recs},
        "wall_time": sum(r.wall_time for r in recs),
    }
    summary["config_hash"] = hx.config_hash({k: v for k, v in summary.items() if k != "wall_time"})
    hx.write_json(out / "summary.json", summary)
    if args.plot:
        hx.plot_traces(out / "trace.svg", {"gpom": [r.best for r in recs]}, f"{args.problem} d={args.dim}")
    s = summary["final_best"]
    print(f"{args.problem} d={args.dim}: median final best {s['median']:.6g} (IQR {s['iqr']:.3g})")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def compare_records(params, gcfg, algorithms, problems, dim, pop, budget, seeds, de_cfg=None, es_cfg=None):
    cells = [(a, p, s) for a in algorithms for p in problems for s in seeds]

    def run(cell):
        a, p, s = cell
        gens = hx.generations_for_budget(a, budget, pop)
        if a.startswith("gpom"):
            return hx.run_gpom(params, gcfg, p, dim, pop, gens, s, name=a)
        return hx.run_baseline(a, p, dim, pop, gens, s, de_cfg, es_cfg)

    for a in algorithms:
        hx.generations_for_budget(a, budget, pop)
    return hx.run_cells(run, cells)


def cmd_compare(args):
    params, gcfg, _ = _load_model(args.model)
    _check_pop(args.pop)
    baselines = _names(args.baselines, ("de", "es", "gpom"))
    algorithms = ["gpom"] + [("gpom_copy" if b == "gpom" else b) for b in baselines]
    if len(set(algorithms)) < 2:
        raise hx.ConfigError("compare needs at least two algorithms")
    problems = _names(args.problems, ALL_IDS)
    seeds = _ints(args.seeds)
    if len(seeds) < 3:
        raise hx.ConfigError("compare needs at least three seeds")
    out = _outdir(args.out)
    recs = compare_records(params, gcfg, algorithms, problems, args.dim, args.pop, args.budget, seeds)
    hx.finite_or_raise(recs)
    for a in algorithms:
        for p in problems:
            hx.write_trace_csv(out / f"trace_{a}_{p}.csv", [r for r in recs if r.algorithm == a and r.problem == p])
    report = hx.comparison_report(recs, "gpom", args.tie_tol)
    report.update(dim=args.dim, pop=args.pop, budget=args.budget, seeds=seeds)
    hx.write_json(out / "summary.json", report)
    hx.write_table_csv(out / "table.csv", report)
    table = hx.markdown_table(report)
    (out / "table.md").write_text(table, encoding="utf-8")
    if args.plot:
        for p in problems:
            series = {a: [r.best for r in recs if r.algorithm == a and r.problem == p] for a in algorithms}
            hx.plot_traces(out / f"curves_{p}.svg", series, f"{p} d={args.dim}")
    print(table, end="")
    for other, v in report["versus"].items():
        print(f"gpom vs {other}: per seed {v['per_seed']}, per problem {v['per_problem_median']}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def ablation_records(params, gcfg, meta, modes, problems, dim, pop, gens, seeds, untrained_seed=None):
    train_cfg = meta.get("train_config", {})
    if untrained_seed is None:
        untrained_seed = int(train_cfg.get("seed", 0))
    recs = []
    for mode in modes:
        p_mode, c_mode = hx.ablation_setup(mode, params, gcfg, untrained_seed, train_cfg.get("init", "normal"))
        cells = [(p, s) for p in problems for s in seeds]
        recs.extend(hx.run_cells(lambda c: hx.run_gpom(p_mode, c_mode, c[0], dim, pop, gens, c[1], name=mode), cells))
    return recs


def cmd_ablate(args):
    params, gcfg, meta = _load_model(args.model)
    _check_pop(args.pop)
    modes = list(hx.ABLATION_MODES) if args.modes == "all" else _names(args.modes, hx.ABLATION_MODES)
    problems = _names(args.problems, ALL_IDS)
    seeds = _ints(args.seeds)
    out = _outdir(args.out)
    recs = ablation_records(params, gcfg, meta, modes, problems, args.dim, args.pop, args.gens, seeds,
                            args.untrained_seed)  # fmt: skip
    hx.finite_or_raise(recs)
    for m in modes:
        for p in problems:
            hx.write_trace_csv(out / f"trace_{m}_{p}.csv", [r for r in recs if r.algorithm == m and r.problem == p])
    report = hx.comparison_report(recs, modes[0], args.tie_tol)
    report.update(dim=args.dim, pop=args.pop, gens=args.gens, seeds=seeds)
    hx.write_json(out / "summary.json", report)
    hx.write_table_csv(out / "table.csv", report)
    table = hx.markdown_table(report)
    (out / "table.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- dump


def export_strategy_dumps(params, gcfg, problem, dim, pop, gens, steps, seed, out):
    """Write post-mask S and cr at the requested generations; returns the written paths."""
    prob, X0, rng = hx.seeded_instance(problem, dim, seed, pop)
    state = Population.evaluate(X0, prob)
    wanted = set(steps)
    written = []
    for t in range(1, gens + 1):
        draws = draw_step(state.n, dim, gcfg, rng, state.fitness)
        res = step_graph(state.X, state.fitness, prob, params, gcfg, draws)
        if t in wanted:
            for name, M in (("S", res.S.data), ("cr", res.cr.data)):
                path = Path(out) / f"{name}_t{t}.csv"
                hx.write_matrix_csv(path, M)
                written.append(path)
        state = Population(np.array(res.X_next.data), np.array(res.f_next.data).reshape(-1), t)
    return written


def cmd_dump(args):
    params, gcfg, _ = _load_model(args.model)
    _check_pop(args.pop)
    steps = _ints(args.steps)
    if min(steps) < 1 or max(steps) > args.gens:
        raise hx.ConfigError(f"--steps must lie in 1..{args.gens}")
    out = _outdir(args.out)
    paths = export_strategy_dumps(params, gcfg, args.problem, args.dim, args.pop, args.gens, steps, args.seed, out)
    print(f"wrote {len(paths)} matrices to {out}")
    return EXIT_OK


def cmd_summarize(args):
    print(json.dumps(hx.trace_summary(args.trace), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="glhf", description="Train and evaluate the learned DE optimizer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="meta-train a model on the training functions")
    t.add_argument("--config", help="JSON file of training keys plus an optional 'model' object")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss-csv")
    t.set_defaults(fn=cmd_train)

    def common(sp, single_problem):
        sp.add_argument("--model", required=True)
        if single_problem:
            sp.add_argument("--problem", required=True, choices=ALL_IDS)
        sp.add_argument("--dim", type=int, required=True)
        sp.add_argument("--pop", type=int, default=100)
        sp.add_argument("--seeds", default="0,1,2,3,4")
        sp.add_argument("--out", required=True)

    o = sub.add_parser("optimize", help="run the model on one problem")
    common(o, True)
    o.add_argument("--gens", type=int, default=100)
    o.add_argument("--mode", default="full", choices=("full", "no_lmm", "no_lcm", "no_mask"))
    o.add_argument("--plot", action="store_true")
    o.set_defaults(fn=cmd_optimize)

    c = sub.add_parser("compare", help="model against baselines at equal evaluation budget")
    common(c, False)
    c.add_argument("--baselines", default="de,es")
    c.add_argument("--problems", default="TF5,TF6,TF7,TF8")
    c.add_argument("--budget", type=int, required=True, help="objective evaluations per run")
    c.add_argument("--tie-tol", type=float, default=1e-8)
    c.add_argument("--plot", action="store_true")
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("ablate", help="full model against its ablations")
    common(a, False)
    a.add_argument("--modes", default="all")
    a.add_argument("--problems", default="TF5,TF6,TF7,TF8")
    a.add_argument("--gens", type=int, default=100)
    a.add_argument("--untrained-seed", type=int)
    a.add_argument("--tie-tol", type=float, default=1e-8)
    a.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("dump", help="export strategy matrices and crossover rates")
    d.add_argument("--model", required=True)
    d.add_argument("--problem", required=True, choices=ALL_IDS)
    d.add_argument("--dim", type=int, required=True)
    d.add_argument("--pop", type=int, default=100)
    d.add_argument("--gens", type=int, default=10)
    d.add_argument("--steps", default="1")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump)

    s = sub.add_parser("summarize", help="recompute final-best statistics from a trace CSV")
    s.add_argument("--trace", required=True)
    s.set_defaults(fn=cmd_summarize)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except hx.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
