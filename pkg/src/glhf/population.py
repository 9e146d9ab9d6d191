from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Population:
    """Candidate solutions with their cached fitness."""

    X: np.ndarray
    fitness: np.ndarray
    generation: int = 0

    @classmethod
    def evaluate(cls, X, problem, generation=0):
        X = np.asarray(X, dtype=np.float64)
        return cls(X, problem.eval(X), generation)

    @classmethod
    def random(cls, problem, n, rng):
        return cls.evaluate(problem.initial_population(n, rng), problem)

    @property
    def n(self):
        return self.X.shape[0]

    def best(self):
        return float(np.min(self.fitness))

    def mean(self):
        return float(np.mean(self.fitness))

    def copy(self):
        return Population(self.X.copy(), self.fitness.copy(), self.generation)
