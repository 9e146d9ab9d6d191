"""Shifted analytic training/test functions TF1-TF8.

Every function is defined on ``z = x - shift`` and takes an ``(n, d)`` batch.
``value`` and ``gradient`` are pure; :meth:`Problem.eval` additionally counts
objective evaluations.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

TRAIN_IDS = ("TF1", "TF2", "TF3", "TF4")
TEST_IDS = ("TF5", "TF6", "TF7", "TF8")
ALL_IDS = TRAIN_IDS + TEST_IDS

# id -> (x bound, shift bound); boxes are symmetric
RANGES = {
    "TF1": (10.0, 10.0),
    "TF2": (10.0, 10.0),
    "TF3": (100.0, 50.0),
    "TF4": (100.0, 50.0),
    "TF5": (100.0, 50.0),
    "TF6": (5.0, 2.5),
    "TF7": (600.0, 300.0),
    "TF8": (32.0, 16.0),
}


def _tf1(z):
    return np.abs(z).sum(axis=1)


def _tf1_grad(z):
    return np.sign(z)


def _tf2(z):
    return np.abs(z[:, :-1] + z[:, 1:]).sum(axis=1) + np.abs(z).sum(axis=1)


def _tf2_grad(z):
    s = np.sign(z[:, :-1] + z[:, 1:])
    g = np.sign(z)
    g[:, :-1] += s
    g[:, 1:] += s
    return g


def _tf3(z):
    return (z * z).sum(axis=1)


def _tf3_grad(z):
    return 2.0 * z


def _tf4(z):
    return np.abs(z).max(axis=1)


def _tf4_grad(z):
    a = np.abs(z)
    idx = np.argmax(a, axis=1)
    rows = np.arange(z.shape[0])
    g = np.zeros_like(z)
    g[rows, idx] = np.sign(z[rows, idx])
    return g


def _tf5(z):
    a, b = z[:, :-1], z[:, 1:]
    return (100.0 * (a * a - b) ** 2 + (a - 1.0) ** 2).sum(axis=1)


def _tf5_grad(z):
    a, b = z[:, :-1], z[:, 1:]
    t = a * a - b
    g = np.zeros_like(z)
    g[:, :-1] += 400.0 * t * a + 2.0 * (a - 1.0)
    g[:, 1:] += -200.0 * t
    return g


def _tf6(z):
    return (z * z - 10.0 * np.cos(2.0 * np.pi * z) + 10.0).sum(axis=1)


def _tf6_grad(z):
    return 2.0 * z + 20.0 * np.pi * np.sin(2.0 * np.pi * z)


def _tf7(z):
    sq = np.sqrt(np.arange(1, z.shape[1] + 1, dtype=np.float64))
    return (z * z).sum(axis=1) / 4000.0 - np.prod(np.cos(z / sq), axis=1) + 1.0


def _tf7_grad(z):
    sq = np.sqrt(np.arange(1, z.shape[1] + 1, dtype=np.float64))
    c = np.cos(z / sq)
    s = np.sin(z / sq)
    d = z.shape[1]
    # product of the other cosines without dividing by a possibly-zero factor
    others = np.empty_like(c)
    for k in range(d):
        others[:, k] = np.prod(np.delete(c, k, axis=1), axis=1)
    return z / 2000.0 + others * s / sq


def _tf8(z):
    d = z.shape[1]
    r = np.sqrt((z * z).sum(axis=1) / d)
    c = np.cos(2.0 * np.pi * z).sum(axis=1) / d
    return -20.0 * np.exp(-0.2 * r) - np.exp(c) + 20.0 + np.e


def _tf8_grad(z):
    d = z.shape[1]
    r = np.sqrt((z * z).sum(axis=1) / d)
    c = np.cos(2.0 * np.pi * z).sum(axis=1) / d
    safe = np.where(r > 0, r, 1.0)
    g1 = np.where(r[:, None] > 0, 4.0 * np.exp(-0.2 * r)[:, None] * z / (d * safe[:, None]), 0.0)
    g2 = np.exp(c)[:, None] * 2.0 * np.pi * np.sin(2.0 * np.pi * z) / d
    return g1 + g2


FUNCTIONS = {
    "TF1": (_tf1, _tf1_grad),
    "TF2": (_tf2, _tf2_grad),
    "TF3": (_tf3, _tf3_grad),
    "TF4": (_tf4, _tf4_grad),
    "TF5": (_tf5, _tf5_grad),
    "TF6": (_tf6, _tf6_grad),
    "TF7": (_tf7, _tf7_grad),
    "TF8": (_tf8, _tf8_grad),
}


def _check_id(fid):
    if fid not in FUNCTIONS:
        raise ValueError(f"unknown function id {fid!r}; expected one of {ALL_IDS}")


def sample_shift(fid, d, seed):
    """Uniform shift inside the function's shift range, reproducible from ``seed``."""
    _check_id(fid)
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng(seed)
    w = RANGES[fid][1]
    return rng.uniform(-w, w, size=d)


@dataclass
class Problem:
    """A shifted objective with box bounds and an evaluation counter."""

    id: str
    d: int
    shift: np.ndarray
    seed: int | None = None
    lower: np.ndarray = field(default=None)
    upper: np.ndarray = field(default=None)
    eval_budget_used: int = 0

    def __post_init__(self):
        _check_id(self.id)
        if self.d < 1 or (self.id in ("TF2", "TF5") and self.d < 2):
            raise ValueError(f"{self.id} needs a larger dimension than {self.d}")
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if self.shift.shape != (self.d,):
            raise ValueError(f"shift has {self.shift.size} entries, expected {self.d}")
        xb, wb = RANGES[self.id]
        if np.any(np.abs(self.shift) > wb):
            raise ValueError(f"shift outside [-{wb}, {wb}] for {self.id}")
        if self.lower is None:
            self.lower = np.full(self.d, -xb)
        if self.upper is None:
            self.upper = np.full(self.d, xb)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be strictly below upper bounds")
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @classmethod
    def sample(cls, fid, d, seed):
        return cls(fid, d, sample_shift(fid, d, seed), seed=seed)

    def _z(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ad.DimensionError(f"{self.id}: expected (n, {self.d}) input, got {X.shape}")
        return X - self.shift

    def value(self, X):
        """Objective values without touching the counter."""
        return FUNCTIONS[self.id][0](self._z(X))

    def eval(self, X):
        f = self.value(X)
        with self._lock:
            self.eval_budget_used += f.shape[0]
        return f

    def grad(self, X):
        return FUNCTIONS[self.id][1](self._z(X))

    def objective(self, X):
        """Counted evaluation of an ``(n, d)`` tensor as a differentiable ``(n, 1)`` column."""
        X = ad.as_tensor(X)
        f = self.eval(X.data)
        data = X.data

        def rule(g):
            return (g * self.grad(data),)

        return ad.custom((X,), f[:, None], rule, name=f"objective[{self.id}]")

    def clip(self, X):
        return clip_to_bounds(X, self)

    def optimum(self):
        """A point attaining the global minimum of zero."""
        return self.shift + 1.0 if self.id == "TF5" else self.shift.copy()

    def initial_population(self, n, rng):
        return rng.uniform(self.lower, self.upper, size=(n, self.d))

    def to_json(self):
        return json.dumps({"id": self.id, "d": self.d, "seed": self.seed, "shift": [float(v) for v in self.shift]})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text) if isinstance(text, str) else text
        shift = obj.get("shift")
        if shift is None:
            return cls.sample(obj["id"], int(obj["d"]), obj["seed"])
        return cls(obj["id"], int(obj["d"]), np.asarray(shift), seed=obj.get("seed"))


def clip_to_bounds(X, problem):
    """Clamp rows into the problem box; tensors keep a clamp-aware gradient."""
    if isinstance(X, ad.Tensor):
        return ad.clamp(X, problem.lower, problem.upper)
    return np.clip(X, problem.lower, problem.upper)


def training_set(preset):
    """Function ids for the cumulative training presets ``"1"`` .. ``"8"``."""
    k = int(preset)
    if not 1 <= k <= 8:
        raise ValueError(f"training preset must be 1..8, got {preset!r}")
    return ALL_IDS[:k]
