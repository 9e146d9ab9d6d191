"""Classic baselines: DE/rand/1/bin, (mu, lambda)-ES and the DE mutation zoo.

The zoo is written twice on purpose: :func:`apply_strategy` evaluates each
mutation formula directly, :func:`strategy_matrix` expresses the same choice
of indices as an N x N coefficient matrix so that ``S @ X`` reproduces it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .benchmarks import clip_to_bounds
from .population import Population

STRATEGIES = ("rand1", "rand2", "best1", "cur2rand1", "cur2best1", "cur2pbest1")

# number of distinct random partners per strategy (pbest handled separately)
_PARTNERS = {"rand1": 3, "rand2": 5, "best1": 2, "cur2rand1": 3, "cur2best1": 2, "cur2pbest1": 2}


class PopulationTooSmall(ValueError):
    pass


@dataclass
class DeConfig:
    F: float = 0.5
    CR: float = 0.5

    def __post_init__(self):
        if self.F <= 0:
            raise ValueError("F must be positive")
        if not 0.0 <= self.CR <= 1.0:
            raise ValueError("CR must lie in [0, 1]")


@dataclass
class EsConfig:
    """(mu, lambda)-ES settings.

    ``mu`` defaults to ``round(selection * lam)``; ``sigma`` defaults to
    ``0.2 * (upper - lower)`` of the problem.  ``lam=None`` keeps the
    incoming population size.
    """

    selection: float = 0.5
    lam: int | None = None
    mu: int | None = None
    sigma: float | np.ndarray | None = None

    def resolve(self, n, problem):
        lam = self.lam or n
        mu = self.mu if self.mu is not None else max(1, int(round(self.selection * lam)))
        if not 1 <= mu <= lam:
            raise ValueError(f"need 1 <= mu <= lambda, got mu={mu}, lambda={lam}")
        if mu > n:
            raise ValueError(f"mu={mu} exceeds population size {n}")
        sigma = 0.2 * (problem.upper - problem.lower) if self.sigma is None else np.asarray(self.sigma, dtype=float)
        return mu, lam, sigma


def default_p(n):
    return max(1, int(np.floor(0.1 * n)))


def sample_partners(n, k, rng):
    """``(n, k)`` indices, distinct per row and never equal to the row index."""
    if n < k + 1:
        raise PopulationTooSmall(f"need at least {k + 1} individuals, got {n}")
    keys = rng.random((n, n))
    np.fill_diagonal(keys, 2.0)
    return np.argsort(keys, axis=1, kind="stable")[:, :k]


@dataclass
class StrategyDraw:
    strategy: str
    partners: np.ndarray
    best: int
    pbest: np.ndarray | None = None


def draw_strategy(strategy, fitness, rng, p=None):
    """Sample the random indices a strategy needs for every individual."""
    if strategy not in _PARTNERS:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    fitness = np.asarray(fitness)
    n = fitness.shape[0]
    partners = sample_partners(n, _PARTNERS[strategy], rng)
    best = int(np.argmin(fitness))
    pbest = None
    if strategy == "cur2pbest1":
        p = default_p(n) if p is None else p
        top = np.argsort(fitness, kind="stable")[:p]
        pbest = top[rng.integers(0, p, size=n)]
    return StrategyDraw(strategy, partners, best, pbest)


def apply_strategy(X, draw, F):
    """Evaluate the mutation formula directly, row by row."""
    X = np.asarray(X, dtype=np.float64)
    r = draw.partners
    s = draw.strategy
    xb = X[draw.best]
    if s == "rand1":
        return X[r[:, 0]] + F * (X[r[:, 1]] - X[r[:, 2]])
    if s == "rand2":
        return X[r[:, 0]] + F * (X[r[:, 1]] - X[r[:, 2]] + X[r[:, 3]] - X[r[:, 4]])
    if s == "best1":
        return xb + F * (X[r[:, 0]] - X[r[:, 1]])
    if s == "cur2rand1":
        return (1 - F) * X + F * (X[r[:, 0]] - X[r[:, 1]] + X[r[:, 2]])
    if s == "cur2best1":
        return (1 - F) * X + F * xb + F * (X[r[:, 0]] - X[r[:, 1]])
    if s == "cur2pbest1":
        return (1 - F) * X + F * X[draw.pbest] + F * (X[r[:, 0]] - X[r[:, 1]])
    raise ValueError(f"unknown strategy {s!r}")


def strategy_matrix(draw, F):
    """Coefficient matrix ``S`` with ``S @ X`` equal to :func:`apply_strategy`."""
    r = draw.partners
    n = r.shape[0]
    rows = np.arange(n)
    S = np.zeros((n, n))
    s = draw.strategy

    def put(cols, coef):
        np.add.at(S, (rows, cols), coef)

    if s == "rand1":
        put(r[:, 0], 1.0), put(r[:, 1], F), put(r[:, 2], -F)
    elif s == "rand2":
        put(r[:, 0], 1.0), put(r[:, 1], F), put(r[:, 2], -F), put(r[:, 3], F), put(r[:, 4], -F)
    elif s == "best1":
        put(np.full(n, draw.best), 1.0), put(r[:, 0], F), put(r[:, 1], -F)
    elif s == "cur2rand1":
        put(rows, 1 - F), put(r[:, 0], F), put(r[:, 1], -F), put(r[:, 2], F)
    elif s == "cur2best1":
        put(rows, 1 - F), put(np.full(n, draw.best), F), put(r[:, 0], F), put(r[:, 1], -F)
    elif s == "cur2pbest1":
        put(rows, 1 - F), put(draw.pbest, F), put(r[:, 0], F), put(r[:, 1], -F)
    else:
        raise ValueError(f"unknown strategy {s!r}")
    return S


def de_mutation(X, strategy, F, rng, fitness=None, p=None):
    """Mutant vectors for one of the classic strategies."""
    X = np.asarray(X, dtype=np.float64)
    if fitness is None:
        if strategy in ("best1", "cur2best1", "cur2pbest1"):
            raise ValueError(f"{strategy} needs fitness values")
        fitness = np.zeros(X.shape[0])
    return apply_strategy(X, draw_strategy(strategy, fitness, rng, p), F)


def binomial_crossover(X, V, CR, rng):
    n, d = X.shape
    take = rng.random((n, d)) <= CR
    take[np.arange(n), rng.integers(0, d, size=n)] = True
    return np.where(take, V, X)


def de_step(pop, problem, cfg, rng):
    """One DE/rand/1/bin generation with greedy 1-to-1 selection (N evaluations)."""
    V = clip_to_bounds(de_mutation(pop.X, "rand1", cfg.F, rng), problem)
    U = clip_to_bounds(binomial_crossover(pop.X, V, cfg.CR, rng), problem)
    fU = problem.eval(U)
    keep = fU <= pop.fitness
    X = np.where(keep[:, None], U, pop.X)
    f = np.where(keep, fU, pop.fitness)
    return Population(X, f, pop.generation + 1)


def es_offspring(pop, problem, cfg, rng):
    mu, lam, sigma = cfg.resolve(pop.n, problem)
    parents = np.argsort(pop.fitness, kind="stable")[:mu]
    base = pop.X[parents[np.arange(lam) % mu]]
    return base, base + sigma * rng.standard_normal(base.shape)


def es_step(pop, problem, cfg, rng):
    """Comma-selection ES: truncation to mu parents, lambda Gaussian offspring."""
    _, children = es_offspring(pop, problem, cfg, rng)
    children = clip_to_bounds(children, problem)
    return Population(children, problem.eval(children), pop.generation + 1)


def run_baseline(name, problem, X0, generations, rng, de_cfg=None, es_cfg=None):
    """Run ``generations`` steps; returns (best-so-far trace, mean trace, final population)."""
    pop = Population.evaluate(X0, problem)
    best_so_far = pop.best()
    best, mean = [], []
    for _ in range(generations):
        if name == "de":
            pop = de_step(pop, problem, de_cfg or DeConfig(), rng)
        elif name == "es":
            pop = es_step(pop, problem, es_cfg or EsConfig(), rng)
        else:
            raise ValueError(f"unknown baseline {name!r}")
        best_so_far = min(best_so_far, pop.best())
        best.append(best_so_far)
        mean.append(pop.mean())
    return best, mean, pop
