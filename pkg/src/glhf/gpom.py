"""The learnable DE model: feature construction, mutation (LMM), masking,
crossover-rate network (LCM), straight-through crossover and 1-to-1 selection.

All network code runs on :mod:`glhf.autodiff` tensors.  Without an active tape
nothing is recorded, which is how inference stays gradient-free.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .baselines import draw_strategy, strategy_matrix
from .benchmarks import clip_to_bounds
from .population import Population

PRESETS = {
    "VS": (200, 4),
    "S": (500, 4),
    "M": (1000, 4),
    "L": (2000, 20),
    "VL": (5000, 50),
    "XL": (10000, 100),
}

MODES = ("full", "no_lmm", "no_lcm", "no_mask")

LMM_NAMES = ("W_m1", "b_m1", "W_m2", "b_m2", "W_m3", "b_m3")
LCM_NAMES = ("W_c1", "b_c1", "W_c2", "b_c2", "tau_gain", "tau_bias")

CHECKPOINT_FORMAT = 1
SIGMA_EPS = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass
class GpomConfig:
    d_m: int = 200
    d_c: int = 4
    r_mask: float = 0.5
    temperature: float = 1.0
    preset: str = "VS"
    mode: str = "full"
    gumbel: bool = False
    # NO LMM / NO LCM replacement settings
    de_F: float = 0.5
    de_CR: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.r_mask <= 1.0:
            raise ValueError("r_mask must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.preset in PRESETS and PRESETS[self.preset] != (self.d_m, self.d_c):
            self.preset = "custom"

    @classmethod
    def from_preset(cls, name, **kw):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}")
        if name != "VS":
            warnings.warn(
                f"preset {name}: the published parameter count does not match d_m x d_m attention weights",
                stacklevel=2,
            )
        d_m, d_c = PRESETS[name]
        return cls(d_m=d_m, d_c=d_c, preset=name, **kw)

    @property
    def effective_r_mask(self):
        return 0.0 if self.mode == "no_mask" else self.r_mask


# ---------------------------------------------------------------- parameters


class GpomParams:
    """Trainable tensors of both modules, keyed by name."""

    def __init__(self, tensors, d_m, d_c):
        self.tensors = tensors
        self.d_m = d_m
        self.d_c = d_c
        self.check()

    def shapes(self):
        dm, dc = self.d_m, self.d_c
        return {
            "W_m1": (2, dm), "b_m1": (1, dm),
            "W_m2": (dm, dm), "b_m2": (1, dm),
            "W_m3": (dm, dm), "b_m3": (1, dm),
            "W_c1": (4, dc), "b_c1": (1, dc),
            "W_c2": (dc, 1), "b_c2": (1, 1),
            "tau_gain": (1, dc), "tau_bias": (1, dc),
        }  # fmt: skip

    def check(self):
        for name, shape in self.shapes().items():
            t = self.tensors.get(name)
            if t is None:
                raise CheckpointError(f"missing parameter {name}")
            if t.shape != shape:
                raise ad.DimensionError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t.data)):
                raise ad.NonFiniteError(f"{name} has non-finite entries")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return LMM_NAMES + LCM_NAMES

    def parameters(self):
        return [self.tensors[n] for n in self.names()]

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def copy(self):
        return GpomParams(
            {n: ad.Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()}, self.d_m, self.d_c
        )

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    @classmethod
    def zeros(cls, d_m, d_c):
        p = cls.__new__(cls)
        p.d_m, p.d_c = d_m, d_c
        p.tensors = {n: ad.Tensor(np.zeros(s), requires_grad=True) for n, s in p.shapes().items()}
        p.tensors["tau_gain"] = ad.Tensor(np.ones((1, d_c)), requires_grad=True)
        return p

    @classmethod
    def init(cls, config, rng, scheme="normal"):
        """Freshly sampled parameters.

        ``"normal"`` draws every weight and bias from N(0, 1); ``"fan_in"``
        divides weights by sqrt(fan_in) and starts biases at zero.  Layer-norm
        gain starts at one and bias at zero in both schemes.
        """
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        p = cls.zeros(config.d_m, config.d_c)
        for name, shape in p.shapes().items():
            if name.startswith("tau"):
                continue
            draw = rng.standard_normal(shape)
            if scheme == "fan_in":
                draw = draw / math.sqrt(shape[0]) if name.startswith("W") else np.zeros(shape)
            elif scheme != "normal":
                raise ValueError(f"unknown init scheme {scheme!r}")
            p.tensors[name] = ad.Tensor(draw, requires_grad=True)
        return p


# ---------------------------------------------------------------- features


def normalize_fitness(f):
    """Standardize with the population (biased) deviation; flat vectors map to zero."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if f.size < 2:
        raise ValueError("normalize_fitness needs at least two values")
    sigma = f.std()
    if sigma < SIGMA_EPS:
        return np.zeros_like(f)
    return (f - f.mean()) / sigma


def ranks(f):
    """1-based ranks, 1 = smallest; ties go to the lower index first."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    order = np.argsort(f, kind="stable")
    r = np.empty(f.size, dtype=np.int64)
    r[order] = np.arange(1, f.size + 1)
    return r


def centered_rank(f):
    n = np.size(f)
    return (ranks(f) / n - 0.5) * 2.0


def build_H(fitness):
    return np.column_stack([normalize_fitness(fitness), centered_rank(fitness)])


def build_Z(x_fit, v_fit):
    x_fit, v_fit = np.asarray(x_fit).reshape(-1), np.asarray(v_fit).reshape(-1)
    if x_fit.shape != v_fit.shape:
        raise ValueError("fitness vectors of X and V must have the same length")
    return np.column_stack([build_H(x_fit), build_H(v_fit)])


# ---------------------------------------------------------------- modules


def lmm_forward(H, params):
    """Strategy matrix before masking, entries in (-1, 1)."""
    H = ad.as_tensor(H)
    if H.shape[1] != 2:
        raise ad.DimensionError(f"LMM input must have 2 columns, got {H.shape}")
    h = ad.tanh(ad.add_bias(ad.matmul(H, params["W_m1"]), params["b_m1"]))
    q = ad.tanh(ad.add_bias(ad.matmul(h, params["W_m2"]), params["b_m2"]))
    k = ad.tanh(ad.add_bias(ad.matmul(h, params["W_m3"]), params["b_m3"]))
    return ad.tanh(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(params.d_m)))


def sample_mask(n, r_mask, rng):
    """0/1 keep-matrix; always consumes n*n uniforms so later draws line up."""
    return (rng.random((n, n)) >= r_mask).astype(np.float64)


def apply_mask(S_hat, r_mask, rng):
    S_hat = ad.as_tensor(S_hat)
    mask = sample_mask(S_hat.shape[0], r_mask, rng)
    return ad.mul(S_hat, mask), mask


def mutate(S, X, problem):
    S, X = ad.as_tensor(S), ad.as_tensor(X)
    if S.shape[0] != S.shape[1] or S.shape[1] != X.shape[0]:
        raise ad.DimensionError(f"mutate: S {S.shape} against X {X.shape}")
    return clip_to_bounds(ad.matmul(S, X), problem)


def lcm_forward(Z, params):
    """Per-individual crossover rates in (0, 1) as an n x 1 column."""
    Z = ad.as_tensor(Z)
    if Z.shape[1] != 4:
        raise ad.DimensionError(f"LCM input must have 4 columns, got {Z.shape}")
    h = ad.tanh(ad.add_bias(ad.matmul(Z, params["W_c1"]), params["b_c1"]))
    hh = ad.layer_norm(h, params["tau_gain"], params["tau_bias"])
    return ad.sigmoid(ad.add_bias(ad.matmul(hh, params["W_c2"]), params["b_c2"]))


def crossover_weights(cr, r, temperature=1.0, gumbel=None):
    """Hard take-V indicator with a softmax straight-through gradient.

    Column k of individual i compares ``r[i, k]`` against ``cr[i]``.  The
    forward value is 1 where ``cr[i] >= r[i, k]`` (noise-free case); the
    backward pass sees ``softmax((r, cr) / temperature)[1]``, i.e.
    ``sigmoid((cr - r) / temperature)``.  ``gumbel`` is an optional
    ``(2, n, d)`` noise array added to both logits.
    """
    cr = ad.as_tensor(cr)
    n, d = r.shape
    logit_r = r
    crt = ad.tile(cr, d)
    diff = ad.sub(crt, ad.Tensor(logit_r))
    if gumbel is not None:
        diff = ad.add(diff, ad.Tensor(gumbel[1] - gumbel[0]))
    soft = ad.sigmoid(ad.scale(diff, 1.0 / temperature))
    hard = (diff.data >= 0).astype(np.float64)
    # hard + soft - stop_gradient(soft)
    return ad.add(ad.sub(soft, ad.detach(soft)), ad.Tensor(hard)), hard


def crossover_st(X, V, cr, r, temperature=1.0, gumbel=None, problem=None):
    X, V = ad.as_tensor(X), ad.as_tensor(V)
    w, hard = crossover_weights(cr, r, temperature, gumbel)
    U = ad.add(ad.mul(w, V), ad.mul(ad.add(ad.neg(w), 1.0), X))
    if problem is not None:
        U = clip_to_bounds(U, problem)
    return U, hard


def select_sm(X, U, f_X, f_U):
    """Rowwise greedy selection; a trial replaces its parent unless strictly worse.

    Works on arrays or tensors (the accept indicator is a constant either way).
    Returns ``(X_next, f_next, accepted)``.
    """
    fx = np.asarray(f_X.data if isinstance(f_X, ad.Tensor) else f_X, dtype=np.float64).reshape(-1)
    fu_t = f_U if isinstance(f_U, ad.Tensor) else None
    fu = np.asarray(fu_t.data if fu_t is not None else f_U, dtype=np.float64).reshape(-1)
    if fx.shape != fu.shape:
        raise ValueError("fitness vectors differ in length")
    xs = X.shape
    if xs[0] != fx.size or U.shape != xs:
        raise ad.DimensionError("population shapes do not match fitness")
    accept = ~(fu - fx > 0)
    if not isinstance(X, ad.Tensor) and not isinstance(U, ad.Tensor):
        return np.where(accept[:, None], U, X), np.where(accept, fu, fx), accept
    a = accept.astype(np.float64)[:, None]
    X, U = ad.as_tensor(X), ad.as_tensor(U)
    keep = np.repeat(a, xs[1], axis=1)
    X_next = ad.add(ad.mul(U, keep), ad.mul(X, 1.0 - keep))
    f_col = fu_t if fu_t is not None else ad.Tensor(fu[:, None])
    if isinstance(f_X, ad.Tensor):
        fx_col = f_X if f_X.shape == (fx.size, 1) else ad.Tensor(fx[:, None])
        f_next = ad.add(ad.mul(f_col, a), ad.mul(fx_col, 1.0 - a))
    else:
        f_next = ad.add(ad.mul(f_col, a), ad.Tensor((1.0 - a) * fx[:, None]))
    return X_next, f_next, accept


# ---------------------------------------------------------------- one step


@dataclass
class StepDraws:
    """All random quantities one generation consumes, in draw order."""

    mask: np.ndarray
    r: np.ndarray
    de: object = None
    gumbel: np.ndarray | None = None


def draw_step(n, d, config, rng, fitness=None):
    mask = sample_mask(n, config.effective_r_mask, rng)
    de = draw_strategy("rand1", np.zeros(n) if fitness is None else fitness, rng) if config.mode == "no_lmm" else None
    r = rng.random((n, d))
    g = rng.gumbel(size=(2, n, d)) if config.gumbel else None
    return StepDraws(mask, r, de, g)


@dataclass
class StepResult:
    S: object
    V: object
    f_V: np.ndarray
    Z: np.ndarray
    cr: object
    U: object
    f_U: object
    X_next: object
    f_next: object
    accepted: np.ndarray
    take: np.ndarray = field(repr=False, default=None)
    draws: StepDraws = field(repr=False, default=None)
    X_in: np.ndarray = field(repr=False, default=None)
    f_in: np.ndarray = field(repr=False, default=None)


def step_graph(X, f_X, problem, params, config, draws):
    """One generation from explicit random draws.

    ``X`` and ``f_X`` may be tensors that carry gradient from earlier
    generations; the features are always built from their values.  Under an
    active tape the returned ``U``/``X_next``/``f_next`` carry
    gradients to ``params``.  ``f_U`` is a differentiable column only when a
    tape is recording; 2N objective evaluations are consumed either way.
    """
    if not isinstance(X, ad.Tensor):
        X = np.asarray(X, dtype=np.float64)
    f_arr = _flat(f_X).astype(np.float64)
    if not isinstance(f_X, ad.Tensor):
        f_X = f_arr
    n, d = X.shape
    if config.mode == "no_lmm":
        S = ad.Tensor(strategy_matrix(draws.de, config.de_F))
    else:
        S = ad.mul(lmm_forward(build_H(f_arr), params), draws.mask)
    V = mutate(S, X, problem)
    f_V = problem.eval(V.data)
    Z = build_Z(f_arr, f_V)
    if config.mode == "no_lcm":
        cr = ad.Tensor(np.full((n, 1), config.de_CR))
    else:
        cr = lcm_forward(Z, params)
    U, take = crossover_st(X, V, cr, draws.r, config.temperature, draws.gumbel, problem)
    if U.requires_grad:
        f_U = problem.objective(U)
    else:
        f_U = problem.eval(U.data)
    X_next, f_next, accepted = select_sm(X, U, f_X, f_U)
    X_in = np.array(X.data if isinstance(X, ad.Tensor) else X)
    return StepResult(S, V, f_V, Z, cr, U, f_U, X_next, f_next, accepted, take, draws, X_in, f_arr)


def gpom_step(pop, problem, params, config, rng):
    """Advance ``pop`` by one generation (exactly 2N evaluations)."""
    draws = draw_step(pop.n, pop.X.shape[1], config, rng, pop.fitness)
    res = step_graph(pop.X, pop.fitness, problem, params, config, draws)
    X_next = res.X_next.data if isinstance(res.X_next, ad.Tensor) else res.X_next
    f_next = res.f_next.data.reshape(-1) if isinstance(res.f_next, ad.Tensor) else res.f_next
    return Population(np.array(X_next), np.array(f_next), pop.generation + 1)


@dataclass
class Trace:
    best: list = field(default_factory=list)
    mean: list = field(default_factory=list)

    def record(self, pop):
        self.best.append(pop.best())
        self.mean.append(pop.mean())

    def __len__(self):
        return len(self.best)


def gpom_rollout(X0, problem, params, config, T, rng, callback=None):
    """Run T generations from ``X0``; returns ``(trace, final_population)``.

    ``callback(t, pop, result)`` is invoked after each generation when given.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    pop = X0 if isinstance(X0, Population) else Population.evaluate(X0, problem)
    trace = Trace()
    for t in range(T):
        if callback is None:
            pop = gpom_step(pop, problem, params, config, rng)
        else:
            draws = draw_step(pop.n, pop.X.shape[1], config, rng, pop.fitness)
            res = step_graph(pop.X, pop.fitness, problem, params, config, draws)
            pop = Population(np.array(res.X_next.data), np.array(_flat(res.f_next)), pop.generation + 1)
            callback(t + 1, pop, res)
        trace.record(pop)
    return trace, pop


def _flat(f):
    return (f.data if isinstance(f, ad.Tensor) else np.asarray(f)).reshape(-1)


# ---------------------------------------------------------------- checkpoints


def _array_json(t):
    data = ", ".join(format(float(v), ".17g") for v in t.data.reshape(-1))
    return f'{{"shape": [{t.shape[0]}, {t.shape[1]}], "data": [{data}]}}'


def dumps_checkpoint(params, config, train_meta=None):
    """Versioned JSON text; floats carry 17 significant digits."""
    head = {
        "format": CHECKPOINT_FORMAT,
        "d_m": params.d_m,
        "d_c": params.d_c,
        "r_mask": config.r_mask,
        "temperature": config.temperature,
        "preset": config.preset,
    }
    lines = ["{"]
    for k, v in head.items():
        lines.append(f"  {json.dumps(k)}: {json.dumps(v)},")
    for group, names in (("theta1", LMM_NAMES), ("theta2", LCM_NAMES)):
        body = ",\n".join(f'    "{n}": {_array_json(params[n])}' for n in names)
        lines.append(f'  "{group}": {{\n{body}\n  }},')
    meta = json.dumps(train_meta or {}, sort_keys=True)
    lines.append(f'  "train_meta": {meta}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def loads_checkpoint(text):
    """Inverse of :func:`dumps_checkpoint`; returns ``(params, config, train_meta)``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {obj.get('format')!r}")
    d_m, d_c = int(obj["d_m"]), int(obj["d_c"])
    tensors = {}
    for group in ("theta1", "theta2"):
        for name, arr in obj[group].items():
            shape = tuple(arr["shape"])
            tensors[name] = ad.Tensor(np.array(arr["data"], dtype=np.float64).reshape(shape), requires_grad=True)
    params = GpomParams(tensors, d_m, d_c)
    preset = obj.get("preset", "custom")
    config = GpomConfig(d_m=d_m, d_c=d_c, r_mask=obj["r_mask"], temperature=obj["temperature"], preset=preset)
    return params, config, obj.get("train_meta", {})


def save_checkpoint(path, params, config, train_meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(params, config, train_meta))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())


def config_dict(config):
    return asdict(config)
