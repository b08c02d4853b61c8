"""Training objectives, the Adam optimiser, early stopping and the meta-training loop.

Objectives are returned as scalar Tensors to be *maximised*.  Every stochastic
objective takes either an explicit ``eps`` (common random numbers) or an
``rng`` from which ``M`` noise draws are made.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Task, union
from .distributions import kl_diag
from .errors import NumericalError, PSDError, TrainingAborted
from .neural_processes import np_log_likelihood
from .posteriors import AMFVIModel, BNNModel, log_likelihood
from .tensor import Tensor

OBJECTIVES = ("elbo", "npml", "npvi")


def _is_bnn(model) -> bool:
    return isinstance(model, BNNModel)


def _noise(model, M, rng, eps):
    if eps is not None:
        return eps
    if M < 1:
        raise ValueError("need at least one Monte Carlo sample")
    return model.draw_eps(M, rng if rng is not None else np.random.default_rng())


def _target_loglik(model: BNNModel, weights, task: Task) -> Tensor:
    return log_likelihood(model.cfg, model.forward(weights, task.X), task.Y)


def elbo_objective(model: BNNModel, task: Task, M: int = 5, rng=None, eps=None) -> Tensor:
    """Monte Carlo ELBO; analytic KL for the mean-field families."""
    if len(task) == 0:
        raise ValueError("ELBO needs a non-empty task")
    if not _is_bnn(model):
        raise TypeError(f"ELBO is defined for BNN posteriors, not {type(model).__name__}")
    ws = model.sample(task, _noise(model, M, rng, eps))
    ll = _target_loglik(model, ws.weights, task)
    if model.analytic_kl:
        return ll.mean() - model.kl(task)
    return (ll + ws.log_p - ws.log_q).mean()


def npml_objective(model, context: Task, target: Task, M: int = 5, rng=None, eps=None) -> Tensor:
    """Log of the MC-averaged target likelihood under the context-conditioned model."""
    if len(target) == 0:
        raise ValueError("NPML needs a non-empty target set")
    if not _is_bnn(model):
        mean, var = model.predict(context, target.X)
        return np_log_likelihood(mean, var, target.Y)
    ws = model.sample(context, _noise(model, M, rng, eps))
    ll = _target_loglik(model, ws.weights, target)
    return T.logsumexp(ll, axis=0) - math.log(ll.shape[0])


def npvi_objective(model: BNNModel, context: Task, target: Task, M: int = 5, rng=None, eps=None) -> Tensor:
    """Expected target log-likelihood minus KL from the union posterior to the context posterior.

    Weights come from the posterior given context and target together; the
    KL is an MC estimate at those same weights, or analytic for AMFVI.
    """
    if len(context) == 0 and len(target) == 0:
        raise ValueError("NPVI needs a non-empty context or target")
    if not _is_bnn(model):
        raise TypeError(f"NPVI is defined for BNN posteriors, not {type(model).__name__}")
    full = union(context, target)
    ws = model.sample(full, _noise(model, M, rng, eps))
    ll = _target_loglik(model, ws.weights, target) if len(target) else Tensor(np.zeros(ws.num_samples))
    if isinstance(model, AMFVIModel):
        q_full, q_ctx = model.posterior(full), model.posterior(context)
        kl = 0.0
        for i in range(model.cfg.depth):
            kl = kl + kl_diag(q_full.layer(i), q_ctx.layer(i))
        return ll.mean() - kl
    if model.analytic_kl:
        # context-free posterior: conditioning on more data changes nothing
        return ll.mean()
    return (ll - ws.log_q + model.log_q(context, ws.weights)).mean()


def context_target_split(task: Task, rng: np.random.Generator) -> tuple[Task, Task]:
    """Random context subset (fraction drawn from U[0.1, 0.9]); the target is the whole task."""
    if len(task) == 0:
        raise ValueError("cannot split an empty task")
    frac = rng.uniform(0.1, 0.9)
    keep = rng.random(len(task)) < frac
    return task.subset(np.flatnonzero(keep)), Task(task.X, task.Y)


def task_objective(model, task: Task, kind: str, M: int, rng: np.random.Generator) -> Tensor:
    """One task's contribution for the named objective.

    Image tasks carry their context mask; other tasks are split at random for
    the neural-process objectives.
    """
    if kind == "elbo":
        return elbo_objective(model, task, M, rng)
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}")
    if task.mask is not None:
        context, target = task.context(), Task(task.X, task.Y)
    else:
        context, target = context_target_split(task, rng)
    if kind == "npml":
        return npml_objective(model, context, target, M, rng)
    return npvi_objective(model, context, target, M, rng)


# ---------------------------------------------------------------------------
# optimiser and early stopping
# ---------------------------------------------------------------------------


class Adam:
    """Adam ascent on a dict of leaf Tensors (the objective is maximised)."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data + self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class EarlyStopper:
    """Tracks a smoothed maximisation objective and flags when it stalls."""

    def __init__(self, start: int, patience: int, window: int):
        if window < 1 or patience < 1 or start < 0:
            raise ValueError("early stopping needs window >= 1, patience >= 1, start >= 0")
        self.start, self.patience, self.window = start, patience, window
        self.raw: list = []
        self.smoothed: list = []
        self.best = -math.inf
        self.last_improve = 0

    def update(self, value: float) -> bool:
        self.raw.append(float(value))
        t = len(self.raw) - 1
        s = float(np.mean(self.raw[-self.window:]))
        self.smoothed.append(s)
        if s > self.best:
            self.best, self.last_improve = s, t
        return t >= self.start and t - self.last_improve >= self.patience


def early_stop(history, start: int, patience: int, window: int):
    """First epoch at which the smoothed history has stalled for ``patience`` epochs, else None."""
    stopper = EarlyStopper(start, patience, window)
    for t, v in enumerate(history):
        if stopper.update(v):
            return t
    return None


# ---------------------------------------------------------------------------
# meta-training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 5
    max_epochs: int = 1000
    es_start: int = 100
    patience: int = 50
    window: int = 50
    seed: int = 0
    mc_samples: int = 5

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "patience", "window", "mc_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.es_start < 0 or self.es_start > self.max_epochs:
            raise ValueError("early-stop start must lie in [0, max_epochs]")


@dataclass
class TrainingRun:
    raw: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    stop_epoch: int | None = None
    params: dict = field(default_factory=dict)
    seed_trace: list = field(default_factory=list)
    checkpoint: str | None = None


def task_rng(seed: int, epoch: int, task_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, task_id]))


def meta_train(model, meta: list, objective, cfg: TrainConfig, checkpoint_path=None,
               progress: Callable | None = None) -> TrainingRun:
    """Maximise the mean per-task objective with one Adam step per task minibatch.

    ``objective`` is an objective name or a callable ``(model, task, rng) -> Tensor``.
    """
    if len(meta) == 0:
        raise ValueError("meta-dataset is empty")
    if callable(objective):
        fn = objective
    elif objective in OBJECTIVES:
        fn = lambda m, task, rng: task_objective(m, task, objective, cfg.mc_samples, rng)  # noqa: E731
    else:
        raise ValueError(f"unknown objective {objective!r}")

    params = model.parameters() if hasattr(model, "parameters") else {}
    keys = list(params)
    opt = Adam(params, cfg.lr) if params else None
    stopper = EarlyStopper(cfg.es_start, cfg.patience, cfg.window)
    run = TrainingRun()
    batch = min(cfg.batch_size, len(meta))

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(meta))
        run.seed_trace.append([cfg.seed, epoch])
        values = []
        for b0 in range(0, len(meta), batch):
            ids = order[b0:b0 + batch]
            acc = {k: np.zeros_like(params[k].data) for k in keys}
            for tid in ids:
                try:
                    obj = fn(model, meta[tid], task_rng(cfg.seed, epoch, int(tid)))
                except (NumericalError, PSDError, FloatingPointError) as exc:
                    raise TrainingAborted(f"epoch {epoch}, task {int(tid)}: {exc}") from exc
                val = float(obj.data)
                if not math.isfinite(val):
                    raise TrainingAborted(f"non-finite objective at epoch {epoch}, task {int(tid)}")
                values.append(val)
                if keys and obj.requires_grad:
                    for k, g in zip(keys, T.grad(obj, [params[k] for k in keys])):
                        acc[k] += g / len(ids)
            if opt is not None:
                if not all(np.all(np.isfinite(g)) for g in acc.values()):
                    raise TrainingAborted(f"non-finite gradient at epoch {epoch}, tasks {ids.tolist()}")
                opt.step(acc)
        stop = stopper.update(float(np.mean(values)))
        if progress is not None:
            progress(epoch, stopper.raw[-1], stopper.smoothed[-1])
        if stop:
            run.stop_epoch = epoch
            break

    run.raw, run.smoothed = stopper.raw, stopper.smoothed
    run.params = {k: p.data.copy() for k, p in params.items()}
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(params, checkpoint_path, model_id=getattr(model, "kind", type(model).__name__))
        run.checkpoint = str(checkpoint_path)
    return run
