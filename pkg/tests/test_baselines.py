import numpy as np
import pytest

from glhf import baselines as bl
from glhf.benchmarks import Problem
from glhf.population import Population


def _pop(prob, n, seed):
    return Population.random(prob, n, np.random.default_rng(seed))


def test_rand1_with_equal_difference_pair():
    X = np.random.default_rng(0).normal(size=(6, 3))
    X[2] = X[3]
    draw = bl.StrategyDraw("rand1", np.array([[1, 2, 3]] * 6), best=0)
    V = bl.apply_strategy(X, draw, 0.5)
    assert np.array_equal(V, np.repeat(X[1:2], 6, axis=0))


def test_best1_with_zero_scale():
    rng = np.random.default_rng(1)
    X, f = rng.normal(size=(8, 4)), rng.normal(size=8)
    draw = bl.draw_strategy("best1", f, rng)
    V = bl.apply_strategy(X, draw, 0.0)
    assert np.array_equal(V, np.repeat(X[np.argmin(f)][None], 8, axis=0))


@pytest.mark.parametrize("strategy", bl.STRATEGIES)
def test_strategy_matrix_rows_are_affine(strategy):
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = int(rng.integers(8, 20))
        draw = bl.draw_strategy(strategy, rng.normal(size=n), rng)
        S = bl.strategy_matrix(draw, float(rng.uniform(0.1, 1.0)))
        assert np.allclose(S.sum(axis=1), 1.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("strategy", bl.STRATEGIES)
def test_matrix_form_matches_direct_formula(strategy):
    rng = np.random.default_rng(3)
    for _ in range(20):
        X = rng.uniform(-10, 10, (15, 5))
        draw = bl.draw_strategy(strategy, rng.normal(size=15), rng)
        assert np.max(np.abs(bl.strategy_matrix(draw, 0.5) @ X - bl.apply_strategy(X, draw, 0.5))) <= 1e-12


def test_rand1_with_fixed_indices_matches_brute_force():
    X = np.arange(15.0).reshape(5, 3) ** 1.5
    draw = bl.StrategyDraw("rand1", np.array([[1, 2, 3], [2, 3, 4], [3, 4, 0], [4, 0, 1], [0, 1, 2]]), best=0)
    V = bl.apply_strategy(X, draw, 0.5)
    for i, (a, b, c) in enumerate(draw.partners):
        assert np.array_equal(V[i], X[a] + 0.5 * (X[b] - X[c]))


def test_partners_distinct_and_exclude_self():
    r = bl.sample_partners(10, 5, np.random.default_rng(4))
    for i, row in enumerate(r):
        assert len(set(row)) == 5 and i not in row
    with pytest.raises(bl.PopulationTooSmall):
        bl.sample_partners(5, 5, np.random.default_rng(0))
    with pytest.raises(bl.PopulationTooSmall):
        bl.de_mutation(np.zeros((5, 2)), "rand2", 0.5, np.random.default_rng(0))


def test_pbest_draws_from_top_fraction():
    f = np.arange(40.0)[::-1]
    draw = bl.draw_strategy("cur2pbest1", f, np.random.default_rng(5))
    assert set(draw.pbest) <= set(range(36, 40))


def test_unknown_strategy_and_missing_fitness():
    with pytest.raises(ValueError):
        bl.draw_strategy("rand9", np.zeros(5), np.random.default_rng(0))
    with pytest.raises(ValueError):
        bl.de_mutation(np.zeros((6, 2)), "best1", 0.5, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        bl.DeConfig(F=0.0)
    with pytest.raises(ValueError):
        bl.DeConfig(CR=1.5)
    prob = Problem.sample("TF3", 2, 0)
    with pytest.raises(ValueError):
        bl.EsConfig(mu=12, lam=10).resolve(10, prob)


def test_crossover_cr_one_takes_mutant():
    rng = np.random.default_rng(6)
    X, V = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert np.array_equal(bl.binomial_crossover(X, V, 1.0, rng), V)


def test_crossover_cr_zero_forces_one_coordinate():
    rng = np.random.default_rng(7)
    X, V = np.zeros((50, 6)), np.ones((50, 6))
    U = bl.binomial_crossover(X, V, 0.0, rng)
    assert np.array_equal(U.sum(axis=1), np.ones(50))


def test_de_step_rowwise_non_worsening_and_budget():
    prob = Problem.sample("TF6", 5, 1)
    pop = _pop(prob, 20, 1)
    rng = np.random.default_rng(8)
    for _ in range(30):
        used = prob.eval_budget_used
        nxt = bl.de_step(pop, prob, bl.DeConfig(), rng)
        assert prob.eval_budget_used - used == pop.n
        assert np.all(nxt.fitness <= pop.fitness)
        pop = nxt


def test_de_improves_sphere_two_orders_of_magnitude():
    gains = []
    for seed in range(5):
        prob = Problem.sample("TF3", 10, seed)
        X0 = prob.initial_population(100, np.random.default_rng(seed))
        start = prob.value(X0).min()
        best, _, _ = bl.run_baseline("de", prob, X0, 200, np.random.default_rng(seed))
        gains.append(start / best[-1])
    assert np.median(gains) >= 100


def test_es_zero_sigma_duplicates_parents():
    prob = Problem.sample("TF3", 4, 2)
    pop = _pop(prob, 10, 2)
    parents, children = bl.es_offspring(pop, prob, bl.EsConfig(sigma=0.0), np.random.default_rng(0))
    assert np.array_equal(parents, children)
    top = pop.X[np.argsort(pop.fitness, kind="stable")[:5]]
    assert np.array_equal(parents[:5], top) and np.array_equal(parents[5:], top)


def test_es_selection_fraction():
    prob = Problem.sample("TF3", 4, 2)
    mu, lam, _ = bl.EsConfig().resolve(100, prob)
    assert (mu, lam) == (50, 100)


def test_es_perturbation_magnitude():
    d, sigma = 16, 0.7
    prob = Problem("TF3", d, np.zeros(d))
    pop = Population.evaluate(np.zeros((10_000, d)), prob)
    parents, children = bl.es_offspring(pop, prob, bl.EsConfig(sigma=sigma), np.random.default_rng(9))
    norms = np.linalg.norm(children - parents, axis=1)
    assert abs(norms.mean() / (sigma * np.sqrt(d)) - 1) <= 0.05


def test_es_comma_selection_and_budget():
    prob = Problem.sample("TF8", 6, 3)
    pop = _pop(prob, 30, 3)
    used = prob.eval_budget_used
    nxt = bl.es_step(pop, prob, bl.EsConfig(), np.random.default_rng(0))
    assert prob.eval_budget_used - used == 30
    assert not any(np.any(np.all(nxt.X == x, axis=1)) for x in pop.X)
    assert np.all(nxt.X >= prob.lower) and np.all(nxt.X <= prob.upper)


@pytest.mark.parametrize("name", ["de", "es"])
def test_run_baseline_deterministic(name):
    outs = []
    for _ in range(2):
        prob = Problem.sample("TF7", 5, 4)
        X0 = prob.initial_population(20, np.random.default_rng(4))
        best, mean, pop = bl.run_baseline(name, prob, X0, 15, np.random.default_rng(5))
        outs.append((best, mean, pop.X))
        assert all(b <= a for a, b in zip(best, best[1:]))
    assert outs[0][0] == outs[1][0] and outs[0][1] == outs[1][1] and np.array_equal(outs[0][2], outs[1][2])
    with pytest.raises(ValueError):
        bl.run_baseline("cmaes", prob, X0, 1, np.random.default_rng(0))
