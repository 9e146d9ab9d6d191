"""Gradient-based meta-training of the model over shifted training functions."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .benchmarks import TRAIN_IDS, Problem
from .gpom import GpomConfig, GpomParams, draw_step, step_graph, save_checkpoint

log = logging.getLogger(__name__)

EPS_LOSS = 1e-12
LOSS_HEADER = ("epoch", "generation", "task_id", "loss")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    T: int = 100
    N: int = 100
    d: int = 10
    task_ids: tuple = TRAIN_IDS
    tasks_per_id: int = 4
    epochs: int = 20
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    bptt: bool = False
    init: str = "normal"

    def __post_init__(self):
        self.task_ids = tuple(self.task_ids)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not self.task_ids or self.tasks_per_id < 1:
            raise ValueError("the task set is empty")
        if self.T < 1 or self.N < 4:
            raise ValueError("need T >= 1 and N >= 4")

    @classmethod
    def from_dict(cls, obj):
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        out = asdict(self)
        out["task_ids"] = list(self.task_ids)
        return out


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class LossRecord:
    epoch: int
    generation: int
    task_losses: list
    task_ids: list

    @property
    def mean_loss(self):
        return float(np.mean(self.task_losses))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    c = max_norm / norm
    return {k: g * c for k, g in grads.items()}, norm


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """Bias-corrected Adam; ``params`` and ``grads`` are dicts of arrays keyed by name.

    Returns a new parameter dict; the incoming arrays are not modified.
    """
    grads, _ = clip_grads(grads, clip_norm)
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def loss_step(f_prev, f_new):
    """Relative change in mean fitness; negative means improvement.

    ``f_new`` may be a tensor column (differentiable); ``f_prev`` is treated
    as a constant, as is the denominator.
    """
    prev = float(np.mean(f_prev.data if isinstance(f_prev, ad.Tensor) else f_prev))
    denom = max(abs(prev), EPS_LOSS)
    if isinstance(f_new, ad.Tensor):
        return ad.scale(ad.sub(ad.mean(f_new), prev), 1.0 / denom)
    return (float(np.mean(f_new)) - prev) / denom


def make_tasks(cfg, rng):
    tasks = []
    for fid in cfg.task_ids:
        for _ in range(cfg.tasks_per_id):
            tasks.append(Problem.sample(fid, cfg.d, rng))
    return tasks


def _values(f):
    return np.array(f.data if isinstance(f, ad.Tensor) else f, dtype=np.float64).reshape(-1)


def _apply(params, new):
    for k, arr in new.items():
        t = params[k]
        t.data = arr
        t.zero_grad()


def metagbt_epoch(params, gcfg, cfg, rng, epoch=0, state=None, on_generation=None):
    """One pass of T generations over a freshly sampled task batch.

    Parameters are updated in place after every generation.  Populations are
    detached between generations unless ``cfg.bptt`` is set, in which case the
    graph of the whole epoch is kept and every generation's loss is
    backpropagated through all earlier generations (memory grows with T, so
    this is meant for small configurations).  Returns the list of
    :class:`LossRecord`.  ``on_generation(record, step_results)`` runs after
    each parameter update.
    """
    state = state if state is not None else AdamState()
    tasks = make_tasks(cfg, rng)
    pops = []
    for prob in tasks:
        X = prob.initial_population(cfg.N, rng)
        pops.append((X, prob.eval(X)))
    names = params.names()
    records = []
    # with bptt one tape spans the epoch so each loss also reaches earlier generations
    epoch_tape = ad.Tape() if cfg.bptt else None
    for t in range(1, cfg.T + 1):
        draws = [draw_step(cfg.N, cfg.d, gcfg, rng, _values(f)) for _, f in pops]
        params.zero_grad()
        step_tape = epoch_tape if epoch_tape is not None else ad.Tape()
        losses, new_pops = [], []
        with step_tape:
            terms = []
            for prob, (X, f), dr in zip(tasks, pops, draws):
                res = step_graph(X, f, prob, params, gcfg, dr)
                li = loss_step(f, res.f_next)
                terms.append(li)
                losses.append(li.item() if isinstance(li, ad.Tensor) else float(li))
                new_pops.append(res)
            root = terms[0]
            for term in terms[1:]:
                root = ad.add(root, term)
            root = ad.scale(root, 1.0 / len(terms))
            ad.backward(root, step_tape)
        if not np.all(np.isfinite(losses)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, generation {t}")
        grads = {n: params[n].grad for n in names}
        norm = global_norm(grads)
        if not math.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}, generation {t}")
        if cfg.lr > 0:
            new = adam_update(
                {n: params[n].data for n in names}, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                cfg.grad_clip_norm,
            )  # fmt: skip
            _apply(params, new)
        else:
            state.step += 1
        if cfg.bptt:
            pops = [(r.X_next, r.f_next) for r in new_pops]
        else:
            # next generation starts from detached copies
            pops = [(np.array(r.X_next.data), _values(r.f_next)) for r in new_pops]
        rec = LossRecord(epoch, t, losses, [p.id for p in tasks])
        records.append(rec)
        if on_generation is not None:
            on_generation(rec, new_pops)
    return records


def train(cfg, gcfg=None, params=None, checkpoint_path=None, loss_csv=None, progress=None):
    """Run ``cfg.epochs`` epochs; returns ``(params, records)``.

    A checkpoint is written after every epoch when ``checkpoint_path`` is set
    (and once up front, so ``epochs=0`` still yields a file).
    """
    gcfg = gcfg or GpomConfig()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = GpomParams.init(gcfg, rng, cfg.init)
    state = AdamState()
    records = []
    writer = None
    fh = None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
    try:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, gcfg, _meta(cfg, 0, records))
        for epoch in range(1, cfg.epochs + 1):
            recs = metagbt_epoch(params, gcfg, cfg, rng, epoch, state)
            records.extend(recs)
            if writer is not None:
                for r in recs:
                    for tid, loss in zip(r.task_ids, r.task_losses):
                        writer.writerow((r.epoch, r.generation, tid, format(loss, ".17g")))
                fh.flush()
            tail = float(np.mean([r.mean_loss for r in recs[-10:]]))
            log.info("epoch %d: mean loss %.6g (last 10 generations %.6g)", epoch, epoch_mean(recs), tail)
            if progress is not None:
                progress(epoch, recs)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params, gcfg, _meta(cfg, epoch, records))
    finally:
        if fh is not None:
            fh.close()
    return params, records


def epoch_mean(records, last=None):
    recs = records if last is None else records[-last:]
    return float(np.mean([r.mean_loss for r in recs]))


def _meta(cfg, epoch, records):
    meta = {"train_config": cfg.to_dict(), "epochs_done": epoch}
    if records:
        meta["final_epoch_mean_loss"] = float(format(epoch_mean([r for r in records if r.epoch == epoch]), ".17g"))
    return meta
