"""Variational posteriors over Bayesian-network weights.

Four families share one stochastic forward pass:

* MFVI   - a fully factorised Gaussian with free means/log-variances.
* AMFVI  - the same family, produced from a task by multiplying the prior
           with one diagonal Gaussian factor per datapoint from an inference net.
* POVI   - layerwise conditional Gaussians built by Bayesian linear regression
           onto learned pseudo-observations at learned inducing inputs.
* APOVI  - POVI with the task inputs as inducing inputs and pseudo-observation
           parameters emitted per datapoint by one inference net per layer.

Weight matrices are bias-augmented, ``(D_in + 1, D_out)``, and every sampler
accepts noise with a leading sample axis ``S`` so that ``S`` draws cost one
batched pass.  Noise for the layerwise families is indexed
``eps[layer][sample, neuron, :]``; for the mean-field families it has the
weight's own shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Task
from .distributions import (
    LOG_2PI,
    DiagGaussian,
    GaussianFactorSet,
    blr_posterior,
    clamp_log_var,
    gaussian_product,
    kl_diag,
)
from .errors import DataError, DimensionError
from .networks import InferenceNetBank, MLPParams, augment, infer_pseudo_params, mlp_forward
from .tensor import Tensor, _lift


@dataclass
class GaussianLikelihood:
    noise_var: float = 0.05**2
    trainable: bool = False
    log_noise_var: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        self.log_noise_var = Tensor(math.log(self.noise_var), requires_grad=self.trainable)

    @property
    def current_noise_var(self) -> float:
        return float(np.exp(self.log_noise_var.data))


@dataclass
class BernoulliLikelihood:
    pass


@dataclass
class BNNConfig:
    widths: list  # [D, D1, ..., P]
    activation: str = "relu"
    prior_var: float = 1.0
    likelihood: GaussianLikelihood | BernoulliLikelihood = field(default_factory=GaussianLikelihood)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) <= 0:
            raise ValueError(f"need at least one layer of positive widths, got {self.widths}")
        if self.prior_var <= 0:
            raise ValueError("prior variance must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def layer_shapes(self) -> list:
        return [(a + 1, b) for a, b in zip(self.widths[:-1], self.widths[1:])]

    @property
    def num_weights(self) -> int:
        return sum(a * b for a, b in self.layer_shapes)

    @property
    def bernoulli(self) -> bool:
        return isinstance(self.likelihood, BernoulliLikelihood)

    def extra_parameters(self) -> dict:
        lik = self.likelihood
        if isinstance(lik, GaussianLikelihood) and lik.trainable:
            return {"likelihood.log_noise_var": lik.log_noise_var}
        return {}


@dataclass
class WeightSample:
    """Per-layer weights ``(S, D_in + 1, D_out)`` with per-sample ``log_q`` and ``log_p``."""

    weights: list
    log_q: Tensor
    log_p: Tensor

    @property
    def num_samples(self) -> int:
        w = self.weights[0]
        return w.shape[0] if w.ndim == 3 else 1


# ---------------------------------------------------------------------------
# shared forward pass, prior and likelihood
# ---------------------------------------------------------------------------


def bnn_forward(weights: list, X, activation: str = "relu") -> Tensor:
    """Network outputs ``(S, N, P)`` (or ``(N, P)`` for unbatched weights)."""
    h = _lift(X)
    last = len(weights) - 1
    for i, w in enumerate(weights):
        if h.shape[-1] + 1 != w.shape[-2]:
            raise DimensionError(f"layer {i} expects {w.shape[-2] - 1} inputs, got {h.shape[-1]}")
        h = augment(h) @ w
        if i < last:
            h = T.activation(h, activation)
    return h


def prior_log_prob(weights: list, prior_var: float) -> Tensor:
    total = 0.0
    for w in weights:
        n = w.shape[-1] * w.shape[-2]
        total = total + (w * w).sum(axis=(-2, -1)) * (-0.5 / prior_var) - 0.5 * n * (LOG_2PI + math.log(prior_var))
    return total


def log_likelihood(cfg: BNNConfig, f, y) -> Tensor:
    """Sum of per-point log densities over the last two axes of ``f`` (``N, P``)."""
    f = _lift(f)
    y = np.asarray(y, dtype=np.float64).reshape(f.shape[-2:]) if np.size(y) else np.zeros(f.shape[-2:])
    if cfg.bernoulli:
        if not np.all((y == 0.0) | (y == 1.0)):
            raise DataError("Bernoulli likelihood needs binary targets")
        return (f * y - T.softplus(f)).sum(axis=(-2, -1))
    lnv = cfg.likelihood.log_noise_var
    sq = (f - y) ** 2
    n = y.size
    return (sq * T.exp(-lnv)).sum(axis=(-2, -1)) * -0.5 - 0.5 * n * (LOG_2PI + lnv)


# ---------------------------------------------------------------------------
# MFVI
# ---------------------------------------------------------------------------


@dataclass
class MFVIPosterior:
    means: list
    log_vars: list

    @classmethod
    def from_prior(cls, cfg: BNNConfig, trainable: bool = True) -> "MFVIPosterior":
        lv = math.log(cfg.prior_var)
        return cls(
            [Tensor(np.zeros(s), requires_grad=trainable) for s in cfg.layer_shapes],
            [Tensor(np.full(s, lv), requires_grad=trainable) for s in cfg.layer_shapes],
        )

    @classmethod
    def init(cls, cfg: BNNConfig, rng: np.random.Generator, log_var: float = -6.0) -> "MFVIPosterior":
        means = []
        for a, b in cfg.layer_shapes:
            m = np.zeros((a, b))
            m[:-1] = rng.normal(0.0, 1.0 / math.sqrt(a - 1), size=(a - 1, b))
            means.append(Tensor(m, requires_grad=True))
        return cls(means, [Tensor(np.full(s, log_var), requires_grad=True) for s in cfg.layer_shapes])

    def layer(self, i: int) -> DiagGaussian:
        return DiagGaussian(self.means[i], self.log_vars[i])

    def parameters(self, prefix: str = "mfvi") -> dict:
        out = {}
        for i, (m, lv) in enumerate(zip(self.means, self.log_vars)):
            out[f"{prefix}.{i}.mean"] = m
            out[f"{prefix}.{i}.log_var"] = lv
        return out


def mfvi_sample(post: MFVIPosterior, cfg: BNNConfig, eps: list) -> WeightSample:
    weights, log_q = [], 0.0
    for i, e in enumerate(eps):
        g = post.layer(i)
        w = g.sample(e)
        weights.append(w)
        log_q = log_q + g.log_prob(w)
    return WeightSample(weights, log_q, prior_log_prob(weights, cfg.prior_var))


def mfvi_log_q(post: MFVIPosterior, weights: list) -> Tensor:
    total = 0.0
    for i, w in enumerate(weights):
        total = total + post.layer(i).log_prob(w)
    return total


def mfvi_kl(post: MFVIPosterior, cfg: BNNConfig) -> Tensor:
    total = 0.0
    for i, s in enumerate(cfg.layer_shapes):
        total = total + kl_diag(post.layer(i), DiagGaussian.isotropic(s, cfg.prior_var))
    return total


def _mean_field_noise(cfg: BNNConfig, S: int, rng: np.random.Generator) -> list:
    return [rng.standard_normal((S,) + s) for s in cfg.layer_shapes]


# ---------------------------------------------------------------------------
# AMFVI
# ---------------------------------------------------------------------------


def amfvi_net_init(cfg: BNNConfig, hidden, rng: np.random.Generator) -> MLPParams:
    d_in = cfg.widths[0] + cfg.widths[-1]
    return MLPParams.init([d_in, *hidden, 2 * cfg.num_weights], rng, cfg.activation)


def amfvi_posterior(net: MLPParams, task: Task, cfg: BNNConfig) -> MFVIPosterior:
    """Prior times one diagonal Gaussian factor over all weights per datapoint."""
    if task.in_dim != cfg.widths[0] or task.out_dim != cfg.widths[-1]:
        raise DimensionError(f"task dims ({task.in_dim}, {task.out_dim}) do not match network {cfg.widths}")
    nw = cfg.num_weights
    prior = DiagGaussian.isotropic((nw,), cfg.prior_var)
    h = mlp_forward(net, Tensor(np.concatenate([task.X, task.Y], axis=1)))
    q = gaussian_product(GaussianFactorSet(h[:, :nw], h[:, nw:]), prior)
    means, log_vars, start = [], [], 0
    for s in cfg.layer_shapes:
        n = s[0] * s[1]
        means.append(q.mean[start:start + n].reshape(s))
        log_vars.append(q.log_var[start:start + n].reshape(s))
        start += n
    return MFVIPosterior(means, log_vars)


# ---------------------------------------------------------------------------
# layerwise (POVI / APOVI)
# ---------------------------------------------------------------------------


def layerwise_posterior(cfg: BNNConfig, inputs, pseudo: list, eps=None, weights=None):
    """Walk the layerwise conditional posterior either sampling or evaluating.

    ``pseudo`` holds one ``(targets, precisions)`` pair of shape ``(N, D^l)`` per
    layer.  With ``eps`` each layer is drawn by reparameterisation; with
    ``weights`` the given weights are scored and also drive the propagation.
    Returns ``(weights, log_q, per_layer_posteriors)``.
    """
    if (eps is None) == (weights is None):
        raise ValueError("pass exactly one of eps or weights")
    if len(pseudo) != cfg.depth:
        raise DimensionError(f"expected {cfg.depth} pseudo-observation layers, got {len(pseudo)}")
    feats = augment(inputs)
    out_w, posts, log_q = [], [], 0.0
    for i, (targets, precisions) in enumerate(pseudo):
        post = blr_posterior(feats, targets, precisions, cfg.prior_var)
        if eps is not None:
            e = _lift(eps[i])
            if e.shape[-2:] != post.mean.shape[-2:]:
                raise DimensionError(f"layer {i} noise shape {e.shape} does not match {post.mean.shape}")
            w = post.sample(e)
            lq = post.log_prob_from_noise(e)
        else:
            w = _lift(weights[i]).T
            lq = post.log_prob(w)
        log_q = log_q + lq.sum(axis=-1)
        W = w.T
        out_w.append(W)
        posts.append(post)
        if i < cfg.depth - 1:
            feats = augment(T.activation(feats @ W, cfg.activation))
    return out_w, log_q, posts


def _layerwise_noise(cfg: BNNConfig, S: int, rng: np.random.Generator) -> list:
    return [rng.standard_normal((S, b, a)) for a, b in cfg.layer_shapes]


def apovi_pseudo(bank: InferenceNetBank, task: Task, cfg: BNNConfig, logit_scale: Tensor | None = None) -> list:
    raw = infer_pseudo_params(bank, task.X, task.Y)
    out = []
    for means, log_vars in raw:
        prec = T.exp(-clamp_log_var(log_vars))
        if means is None:
            if cfg.bernoulli:
                scale = T.exp(logit_scale) if logit_scale is not None else 1.0
                means = Tensor(2.0 * task.Y - 1.0) * scale
            else:
                means = Tensor(task.Y)
        out.append((means, prec))
    return out


def apovi_sample(bank: InferenceNetBank, task: Task, cfg: BNNConfig, eps: list,
                 logit_scale: Tensor | None = None) -> WeightSample:
    weights, log_q, _ = layerwise_posterior(cfg, task.X, apovi_pseudo(bank, task, cfg, logit_scale), eps=eps)
    return WeightSample(weights, log_q, prior_log_prob(weights, cfg.prior_var))


def apovi_log_q(bank: InferenceNetBank, task: Task, cfg: BNNConfig, weights: list,
                logit_scale: Tensor | None = None) -> Tensor:
    return layerwise_posterior(cfg, task.X, apovi_pseudo(bank, task, cfg, logit_scale), weights=weights)[1]


@dataclass
class POVIPosterior:
    inducing: Tensor  # (M, D)
    pseudo_means: list  # (M, D^l)
    log_precisions: list  # (M,) shared across neurons of a layer

    @classmethod
    def init(cls, cfg: BNNConfig, num_inducing: int, rng: np.random.Generator,
             task: Task | None = None, log_precision: float = 0.0) -> "POVIPosterior":
        d = cfg.widths[0]
        if task is not None and len(task) >= num_inducing:
            idx = rng.choice(len(task), size=num_inducing, replace=False)
            u, y = task.X[idx], task.Y[idx]
        else:
            u = rng.uniform(-2.0, 2.0, size=(num_inducing, d))
            y = rng.standard_normal((num_inducing, cfg.widths[-1]))
        means = [Tensor(rng.standard_normal((num_inducing, w)), requires_grad=True) for w in cfg.widths[1:-1]]
        means.append(Tensor(y, requires_grad=True))
        log_prec = [Tensor(np.full(num_inducing, log_precision), requires_grad=True) for _ in range(cfg.depth)]
        return cls(Tensor(u, requires_grad=True), means, log_prec)

    def pseudo(self) -> list:
        out = []
        for m, lp in zip(self.pseudo_means, self.log_precisions):
            prec = T.exp(T.clip(lp, -10.0, 10.0)).reshape(-1, 1) * np.ones((1, m.shape[1]))
            out.append((m, prec))
        return out

    def parameters(self, prefix: str = "povi") -> dict:
        out = {f"{prefix}.inducing": self.inducing}
        for i, (m, lp) in enumerate(zip(self.pseudo_means, self.log_precisions)):
            out[f"{prefix}.{i}.pseudo_mean"] = m
            out[f"{prefix}.{i}.log_precision"] = lp
        return out


def povi_sample(post: POVIPosterior, cfg: BNNConfig, eps: list) -> WeightSample:
    weights, log_q, _ = layerwise_posterior(cfg, post.inducing, post.pseudo(), eps=eps)
    return WeightSample(weights, log_q, prior_log_prob(weights, cfg.prior_var))


def povi_log_q(post: POVIPosterior, cfg: BNNConfig, weights: list) -> Tensor:
    return layerwise_posterior(cfg, post.inducing, post.pseudo(), weights=weights)[1]


# ---------------------------------------------------------------------------
# model wrappers: one interface for objectives and training
# ---------------------------------------------------------------------------


class BNNModel:
    """Common surface: parameters, noise drawing, task-conditioned sampling, scoring."""

    kind = "bnn"
    analytic_kl = False

    def __init__(self, cfg: BNNConfig):
        self.cfg = cfg

    def parameters(self) -> dict:
        return dict(self.cfg.extra_parameters())

    def draw_eps(self, S: int, rng: np.random.Generator) -> list:
        return _layerwise_noise(self.cfg, S, rng)

    def sample(self, task: Task, eps: list) -> WeightSample:
        raise NotImplementedError

    def log_q(self, task: Task, weights: list) -> Tensor:
        raise NotImplementedError

    def kl(self, task: Task) -> Tensor:
        raise NotImplementedError

    def forward(self, weights: list, X) -> Tensor:
        return bnn_forward(weights, X, self.cfg.activation)

    def sampler(self, context: Task) -> Callable:
        def draw(S: int, rng: np.random.Generator) -> WeightSample:
            return self.sample(context, self.draw_eps(S, rng))

        return draw


class MFVIModel(BNNModel):
    kind = "mfvi"
    analytic_kl = True

    def __init__(self, cfg: BNNConfig, posterior: MFVIPosterior):
        super().__init__(cfg)
        self.posterior = posterior

    def parameters(self) -> dict:
        return {**self.posterior.parameters(), **super().parameters()}

    def draw_eps(self, S, rng):
        return _mean_field_noise(self.cfg, S, rng)

    def sample(self, task, eps):
        return mfvi_sample(self.posterior, self.cfg, eps)

    def log_q(self, task, weights):
        return mfvi_log_q(self.posterior, weights)

    def kl(self, task):
        return mfvi_kl(self.posterior, self.cfg)


class AMFVIModel(BNNModel):
    kind = "amfvi"
    analytic_kl = True

    def __init__(self, cfg: BNNConfig, net: MLPParams):
        super().__init__(cfg)
        self.net = net

    @classmethod
    def init(cls, cfg: BNNConfig, hidden, rng) -> "AMFVIModel":
        return cls(cfg, amfvi_net_init(cfg, hidden, rng))

    def parameters(self):
        return {**self.net.parameters("amfvi"), **super().parameters()}

    def draw_eps(self, S, rng):
        return _mean_field_noise(self.cfg, S, rng)

    def posterior(self, task: Task) -> MFVIPosterior:
        return amfvi_posterior(self.net, task, self.cfg)

    def sample(self, task, eps):
        return mfvi_sample(self.posterior(task), self.cfg, eps)

    def log_q(self, task, weights):
        return mfvi_log_q(self.posterior(task), weights)

    def kl(self, task):
        return mfvi_kl(self.posterior(task), self.cfg)


class POVIModel(BNNModel):
    kind = "povi"

    def __init__(self, cfg: BNNConfig, posterior: POVIPosterior):
        super().__init__(cfg)
        self.posterior = posterior

    def parameters(self):
        return {**self.posterior.parameters(), **super().parameters()}

    def sample(self, task, eps):
        return povi_sample(self.posterior, self.cfg, eps)

    def log_q(self, task, weights):
        return povi_log_q(self.posterior, self.cfg, weights)


class APOVIModel(BNNModel):
    kind = "apovi"

    def __init__(self, cfg: BNNConfig, bank: InferenceNetBank, logit_scale: Tensor | None = None):
        super().__init__(cfg)
        self.bank = bank
        if cfg.bernoulli and logit_scale is None:
            logit_scale = Tensor(math.log(3.0), requires_grad=True)
        self.logit_scale = logit_scale

    @classmethod
    def init(cls, cfg: BNNConfig, hidden, rng) -> "APOVIModel":
        return cls(cfg, InferenceNetBank.init(cfg.widths, hidden, rng, cfg.activation))

    def parameters(self):
        out = {**self.bank.parameters("apovi"), **super().parameters()}
        if self.logit_scale is not None:
            out["apovi.logit_scale"] = self.logit_scale
        return out

    def sample(self, task, eps):
        return apovi_sample(self.bank, task, self.cfg, eps, self.logit_scale)

    def log_q(self, task, weights):
        return apovi_log_q(self.bank, task, self.cfg, weights, self.logit_scale)

    def posteriors(self, task: Task, eps: list) -> list:
        """Per-layer ``FullGaussian`` conditionals along the path driven by ``eps``."""
        pseudo = apovi_pseudo(self.bank, task, self.cfg, self.logit_scale)
        return layerwise_posterior(self.cfg, task.X, pseudo, eps=eps)[2]


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(sampler: Callable, x_star, cfg: BNNConfig, S: int = 100,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched predictive mean and variance from ``S`` weight samples.

    Gaussian likelihoods add the observation noise to the sample variance;
    Bernoulli likelihoods report the mean probability and its Bernoulli variance.
    """
    if S < 2:
        raise ValueError("prediction needs at least two samples")
    rng = rng if rng is not None else np.random.default_rng()
    with T.no_grad():
        ws = sampler(S, rng)
        f = bnn_forward(ws.weights, np.asarray(x_star, float), cfg.activation).data
    if f.ndim == 2:
        f = np.broadcast_to(f, (S,) + f.shape)
    if cfg.bernoulli:
        prob = T._np_sigmoid(f).mean(axis=0)
        return prob, prob * (1.0 - prob)
    mean = f.mean(axis=0)
    var = f.var(axis=0, ddof=1) + cfg.likelihood.current_noise_var
    return mean, var
