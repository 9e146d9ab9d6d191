"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 4 and 5 share one trained checkpoint (VS model, TF1-TF4, d=10,
T=100, N=100, 40 epochs) built once per session.
"""

import time

import numpy as np
import pytest

from glhf import autodiff as ad
from glhf import baselines as bl
from glhf import cli, gpom, harness as hx, metatrain as mt
from glhf.benchmarks import ALL_IDS, RANGES, Problem, sample_shift
from glhf.gpom import GpomConfig, GpomParams
from glhf.population import Population

from acceptance_log import record
from oracles import micro_fd_errors

SEEDS = [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- 1. gradients


def _fd_error(build, *arrays, h=1e-5):
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape():
        ad.backward(build(*ts))
    nums = ad.numerical_grad(lambda *xs: build(*[ad.Tensor(x) for x in xs]).item(), [a.copy() for a in arrays], h=h)
    return max(ad.relative_error(t.grad, n, floor=1e-7) for t, n in zip(ts, nums))


def _op_cases(rng):
    u = lambda *s: rng.uniform(-2, 2, s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2, s)  # noqa: E731
    w = u(3, 4)
    w_col = u(3, 1)

    def weighted(fn):
        return lambda *xs: ad.total(ad.mul(fn(*xs), ad.Tensor(w)))

    x = u(3, 4)
    x[np.abs(x) < 0.05] = 0.5
    srt = np.sort(x, axis=1)
    while np.min(srt[:, -1] - srt[:, -2]) < 1e-2:
        x = u(3, 4)
        x[np.abs(x) < 0.05] = 0.5
        srt = np.sort(x, axis=1)
    return {
        "matmul": (lambda a, b: ad.total(ad.matmul(a, b)), [u(3, 4), u(4, 2)]),
        "add": (weighted(ad.add), [u(3, 4), u(3, 4)]),
        "sub": (weighted(ad.sub), [u(3, 4), u(3, 4)]),
        "mul": (weighted(ad.mul), [u(3, 4), u(3, 4)]),
        "div": (weighted(ad.div), [u(3, 4), pos(3, 4)]),
        "scale": (weighted(lambda a: ad.scale(a, 1.7)), [u(3, 4)]),
        "tanh": (weighted(ad.tanh), [u(3, 4)]),
        "sigmoid": (weighted(ad.sigmoid), [u(3, 4)]),
        "abs": (weighted(ad.absolute), [x]),
        "neg": (weighted(ad.neg), [u(3, 4)]),
        "layer_norm": (weighted(ad.layer_norm), [u(3, 4), u(1, 4), u(1, 4)]),
        "mean": (lambda a: ad.mean(ad.tanh(a)), [u(3, 4)]),
        "sum": (lambda a: ad.total(ad.tanh(a)), [u(3, 4)]),
        "rowmax": (lambda a: ad.total(ad.mul(ad.rowmax(a), ad.Tensor(w_col))), [x]),
        "transpose": (lambda a: ad.total(ad.mul(ad.transpose(a), ad.Tensor(w.T))), [u(3, 4)]),
        "add_bias": (weighted(ad.add_bias), [u(3, 4), u(1, 4)]),
        "tile": (weighted(lambda c: ad.tile(c, 4)), [u(3, 1)]),
    }


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    op_err = {}
    for trial in range(3):
        for name, (build, arrays) in _op_cases(rng).items():
            op_err[name] = max(op_err.get(name, 0.0), _fd_error(build, *arrays))
    micro = micro_fd_errors(bptt=False)
    elapsed = time.perf_counter() - t0
    worst_op = max(op_err, key=op_err.get)
    passed = max(op_err.values()) <= 1e-4 and max(micro) <= 1e-3 and elapsed < 30
    record(1, "gradient suite", passed,
           f"worst op {worst_op} rel err {op_err[worst_op]:.2e} (<= 1e-4), end-to-end micro step "
           f"max rel err {max(micro):.2e} over T={len(micro)} (<= 1e-3), {elapsed:.1f} s (< 30 s)")  # fmt: skip
    assert passed


# ---------------------------------------------------------------- 2. DE embedding


def test_criterion_2_de_embedding():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, bitwise = 0.0, 0
    total = 0
    for strategy in bl.STRATEGIES:
        for _ in range(100):
            n = int(rng.integers(8, 40))
            d = int(rng.integers(1, 20))
            X = rng.uniform(-100, 100, (n, d))
            draw = bl.draw_strategy(strategy, rng.normal(size=n), rng)
            F = float(rng.uniform(0.1, 1.0))
            prob = Problem("TF3", d, np.zeros(d), lower=-1e12, upper=1e12)
            got = gpom.mutate(bl.strategy_matrix(draw, F), X, prob).data
            want = bl.apply_strategy(X, draw, F)
            worst = max(worst, float(np.max(np.abs(got - want))))
            bitwise += int(np.array_equal(got, want))
            total += 1
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-12 and elapsed < 10
    record(2, "DE-embedding oracle", passed,
           f"{total} instances over {len(bl.STRATEGIES)} strategies, max abs diff {worst:.1e} (<= 1e-12), "
           f"{bitwise} bitwise equal, {elapsed:.1f} s (< 10 s)")  # fmt: skip
    assert passed


# ---------------------------------------------------------------- 3. monotonicity / budget


def test_criterion_3_monotonicity_and_budget():
    t0 = time.perf_counter()
    master = np.random.default_rng(99)
    worsened, wrong_budget = 0, 0
    for k in range(1000):
        rng = np.random.default_rng(master.integers(2**63))
        fid = ALL_IDS[int(rng.integers(len(ALL_IDS)))]
        d = int(rng.integers(2, 31))
        n = int(rng.integers(4, 41))
        mode = gpom.MODES[k % len(gpom.MODES)]
        cfg = GpomConfig(d_m=int(rng.choice([4, 16, 200])), d_c=int(rng.choice([2, 4])), mode=mode,
                         r_mask=float(rng.uniform(0, 1)))  # fmt: skip
        params = GpomParams.init(cfg, rng, "normal" if k % 2 else "fan_in")
        prob = Problem.sample(fid, d, rng)
        pop = Population.random(prob, n, rng)
        used = prob.eval_budget_used
        nxt = gpom.gpom_step(pop, prob, params, cfg, rng)
        worsened += int(nxt.best() > pop.best())
        wrong_budget += int(prob.eval_budget_used - used != 2 * n)
    elapsed = time.perf_counter() - t0
    passed = worsened == 0 and wrong_budget == 0 and elapsed < 60
    record(3, "monotonicity and budget", passed,
           f"1000 random steps: {worsened} increased the best fitness, {wrong_budget} used other than 2N "
           f"evaluations, {elapsed:.1f} s (< 60 s)")  # fmt: skip
    assert passed


# ---------------------------------------------------------------- shared trained model


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "vs.json"
    cfg = mt.TrainConfig(T=100, N=100, d=10, epochs=40, seed=0)
    gcfg = GpomConfig.from_preset("VS")
    t0 = time.perf_counter()
    params, records = mt.train(cfg, gcfg, checkpoint_path=path)
    return {"path": path, "params": params, "gcfg": gcfg, "cfg": cfg, "records": records,
            "train_time": time.perf_counter() - t0}  # fmt: skip


def _medians(params, gcfg, problems, dim, seeds=SEEDS, gens=100, n=100):
    out = {}
    for p in problems:
        finals = [hx.run_gpom(params, gcfg, p, dim, n, gens, s).final_best for s in seeds]
        out[p] = float(np.median(finals))
    return out


# ---------------------------------------------------------------- 4. training improves


@pytest.mark.slow
def test_criterion_4_training_improves(trained):
    t0 = time.perf_counter()
    problems = ["TF5", "TF6", "TF7", "TF8"]
    untrained, ucfg = hx.ablation_setup("untrained", trained["params"], trained["gcfg"], trained["cfg"].seed, trained["cfg"].init)
    base = _medians(untrained, ucfg, problems, 10)
    ours = _medians(trained["params"], trained["gcfg"], problems, 10)
    wins = [p for p in problems if ours[p] < base[p]]
    elapsed = trained["train_time"] + time.perf_counter() - t0
    detail = ", ".join(f"{p} {ours[p]:.3g} vs {base[p]:.3g}" for p in problems)
    passed = len(wins) >= 3 and elapsed < 7200
    record(4, "training improves the optimizer", passed,
           f"trained beats untrained on {len(wins)}/4 held-out functions (>= 3): {detail}; {elapsed:.0f} s")
    assert passed


# ---------------------------------------------------------------- 5. cross-dimension


@pytest.mark.slow
def test_criterion_5_cross_dimension(trained):
    t0 = time.perf_counter()
    ours, theirs = [], []
    for s in SEEDS:
        ours.append(hx.run_gpom(trained["params"], trained["gcfg"], "TF3", 30, 100, 100, s).final_best)
        gens = hx.generations_for_budget("de", 2 * 100 * 100, 100)
        theirs.append(hx.run_baseline("de", "TF3", 30, 100, gens, s).final_best)
    med_ours, med_de = float(np.median(ours)), float(np.median(theirs))
    ratio = med_de / max(med_ours, 1e-300)
    elapsed = time.perf_counter() - t0
    passed = ratio >= 1e3 and elapsed < 600
    record(5, "cross-dimension generalization", passed,
           f"TF3 d=30 median final best {med_ours:.3g} (regression target <= 1e-3) vs DE {med_de:.3g}, "
           f"ratio {ratio:.3g} (>= 1e3), {elapsed:.0f} s")  # fmt: skip
    assert passed


# ---------------------------------------------------------------- 6. statistics


def test_criterion_6_statistical_contracts():
    t0 = time.perf_counter()
    checks = {}
    zeroed = 1.0 - gpom.sample_mask(100, 0.5, np.random.default_rng(1)).mean()
    checks["mask fraction"] = (0.485 <= zeroed <= 0.515, f"{zeroed:.4f} in [0.485, 0.515]")
    d = 10_000
    _, take = gpom.crossover_st(np.zeros((1, d)), np.ones((1, d)), np.array([[0.3]]), np.random.default_rng(2).random((1, d)))
    rate = take.mean()
    checks["take rate"] = (0.285 <= rate <= 0.315, f"{rate:.4f} in [0.285, 0.315]")
    shift_ok = True
    for fid in ALL_IDS:
        b = RANGES[fid][1]
        s = sample_shift(fid, d, np.random.default_rng(3))
        # uniform on [-b, b]: in range, mean within 3.29 standard errors, each half within a binomial bound
        in_range = s.min() >= -b and s.max() <= b
        mean_ok = abs(s.mean()) <= 3.29 * b / np.sqrt(3 * d)
        half_ok = abs(np.mean(s < 0) - 0.5) <= 3.29 * 0.5 / np.sqrt(d)
        shift_ok &= bool(in_range and mean_ok and half_ok)
    checks["shift ranges"] = (shift_ok, f"{len(ALL_IDS)} functions x {d} draws")
    elapsed = time.perf_counter() - t0
    passed = all(ok for ok, _ in checks.values()) and elapsed < 60
    record(6, "statistical contracts", passed,
           "; ".join(f"{k} {'ok' if ok else 'out'} ({v})" for k, (ok, v) in checks.items()) + f", {elapsed:.1f} s")
    assert passed


# ---------------------------------------------------------------- 7. determinism / round trip


def test_criterion_7_determinism_and_round_trip(tmp_path):
    t0 = time.perf_counter()
    gcfg = GpomConfig(d_m=16, d_c=4)
    cfg = mt.TrainConfig(T=5, N=12, d=3, tasks_per_id=1, epochs=2, seed=11)
    for name in ("a", "b"):
        mt.train(cfg, gcfg, checkpoint_path=tmp_path / f"{name}.json")
    same_ckpt = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    params, c2, meta = gpom.load_checkpoint(tmp_path / "a.json")
    gpom.save_checkpoint(tmp_path / "a2.json", params, c2, meta)
    round_trip = (tmp_path / "a.json").read_bytes() == (tmp_path / "a2.json").read_bytes()
    for name in ("x", "y"):
        cli.main(["optimize", "--model", str(tmp_path / "a.json"), "--problem", "TF7", "--dim", "5", "--pop", "12",
                  "--gens", "10", "--seeds", "0,1,2", "--out", str(tmp_path / name)])  # fmt: skip
    same_trace = (tmp_path / "x" / "trace.csv").read_bytes() == (tmp_path / "y" / "trace.csv").read_bytes()
    elapsed = time.perf_counter() - t0
    passed = same_ckpt and round_trip and same_trace and elapsed < 60
    record(7, "determinism and round trip", passed,
           f"checkpoints identical {same_ckpt}, save-load-save identical {round_trip}, "
           f"traces identical {same_trace}, {elapsed:.1f} s")  # fmt: skip
    assert passed


# ---------------------------------------------------------------- examples that depend on the trained model


@pytest.mark.slow
def test_training_loss_improves(trained):
    first = mt.epoch_mean([r for r in trained["records"] if r.epoch == 1])
    last = mt.epoch_mean([r for r in trained["records"] if r.epoch == trained["cfg"].epochs])
    assert last < first


@pytest.mark.slow
def test_trained_beats_untrained_on_sphere_d30(trained):
    untrained, ucfg = hx.ablation_setup("untrained", trained["params"], trained["gcfg"], trained["cfg"].seed, trained["cfg"].init)
    assert _medians(trained["params"], trained["gcfg"], ["TF3"], 30)["TF3"] < _medians(untrained, ucfg, ["TF3"], 30)["TF3"]


@pytest.mark.slow
def test_trained_sphere_d10_regression_target(trained):
    med = _medians(trained["params"], trained["gcfg"], ["TF3"], 10)["TF3"]
    print(f"trained TF3 d=10 median final best {med:.3g} (target <= 1e-3)")
    assert med <= 1e-3


@pytest.mark.slow
def test_trained_vs_de_held_out_d30(trained):
    problems = ["TF5", "TF6", "TF7", "TF8"]
    ours = _medians(trained["params"], trained["gcfg"], problems, 30)
    de = {}
    for p in problems:
        de[p] = float(np.median([hx.run_baseline("de", p, 30, 100, 200, s).final_best for s in SEEDS]))
    print("gpom vs de at d=30:", {p: (ours[p], de[p]) for p in problems})
    assert sum(ours[p] < de[p] for p in problems) >= 3
