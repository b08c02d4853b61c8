"""Deterministic building blocks: MLPs, inference-network banks, SetConv, grid CNNs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor, _lift


def augment(x) -> Tensor:
    """Append a constant-one column so a bias can live in the weight matrix."""
    x = _lift(x)
    return T.concat([x, Tensor(np.ones(x.shape[:-1] + (1,)))], axis=-1)


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """Bias-augmented ``(fan_in + 1, fan_out)`` weight: N(0, 1/fan_in) rows, zero bias row."""
    w = np.zeros((fan_in + 1, fan_out))
    w[:fan_in] = rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True)


@dataclass
class MLPParams:
    widths: list
    weights: list
    activation: str = "relu"

    @classmethod
    def init(cls, widths, rng: np.random.Generator, activation: str = "relu") -> "MLPParams":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) <= 0:
            raise ValueError(f"invalid MLP widths {widths}")
        ws = [init_weight(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        return cls(widths, ws, activation)

    def parameters(self, prefix: str = "mlp") -> dict:
        return {f"{prefix}.{i}": w for i, w in enumerate(self.weights)}


def mlp_forward(params: MLPParams, x) -> Tensor:
    """Apply the MLP to a vector ``(Din,)`` or a batch of rows ``(..., Din)``."""
    h = _lift(x)
    if h.shape[-1] != params.widths[0]:
        raise DimensionError(f"MLP expects input width {params.widths[0]}, got {h.shape[-1]}")
    last = len(params.weights) - 1
    for i, w in enumerate(params.weights):
        h = augment(h) @ w if h.ndim > 1 else (augment(h.reshape(1, -1)) @ w).reshape(-1)
        if i < last:
            h = T.activation(h, params.activation)
    return h


@dataclass
class InferenceNetBank:
    """One inference MLP per primary-network layer.

    Head ``l`` emits means and log-variances (``2 * D^l`` values) for hidden
    layers and log-variances only (``D^L`` values) for the output layer.
    """

    layer_widths: list
    nets: list = field(default_factory=list)

    @classmethod
    def init(cls, layer_widths, hidden, rng: np.random.Generator, activation: str = "relu") -> "InferenceNetBank":
        """``layer_widths`` is the primary net's ``[D, D1, ..., P]``; inputs are concat(x, y)."""
        layer_widths = [int(w) for w in layer_widths]
        d_in = layer_widths[0] + layer_widths[-1]
        outs = layer_widths[1:]
        nets = []
        for i, d_out in enumerate(outs):
            head = d_out if i == len(outs) - 1 else 2 * d_out
            nets.append(MLPParams.init([d_in, *hidden, head], rng, activation))
        return cls(layer_widths, nets)

    def parameters(self, prefix: str = "bank") -> dict:
        out = {}
        for i, net in enumerate(self.nets):
            out.update(net.parameters(f"{prefix}.{i}"))
        return out


def infer_pseudo_params(bank: InferenceNetBank, x, y) -> list:
    """Per-layer pseudo-observation parameters for datapoints ``(x, y)``.

    Returns a list of ``(means, log_vars)`` with shapes ``(N, D^l)``; the final
    entry has ``means=None`` since the caller supplies the observed outputs.
    """
    x, y = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(y, float))
    d, p = bank.layer_widths[0], bank.layer_widths[-1]
    if x.shape[1] != d or y.shape[1] != p or x.shape[0] != y.shape[0]:
        raise DimensionError(f"inference bank expects x (N,{d}) and y (N,{p}); got {x.shape}, {y.shape}")
    inp = Tensor(np.concatenate([x, y], axis=1))
    out = []
    last = len(bank.nets) - 1
    for i, net in enumerate(bank.nets):
        h = mlp_forward(net, inp)
        width = bank.layer_widths[i + 1]
        if i == last:
            out.append((None, h))
        else:
            out.append((h[:, :width], h[:, width:]))
    return out


def rbf_weight(distance, lengthscale):
    """exp(-d^2 / l^2); works on floats, arrays or Tensors."""
    if isinstance(distance, Tensor) or isinstance(lengthscale, Tensor):
        d = _lift(distance)
        return T.exp(-(d * d) / (_lift(lengthscale) ** 2))
    if np.any(np.asarray(lengthscale) <= 0):
        raise ValueError("lengthscale must be positive")
    return np.exp(-np.square(distance) / np.square(lengthscale))


@dataclass
class SetConvConfig:
    log_lengthscale: Tensor
    density: bool = True

    @classmethod
    def init(cls, lengthscale: float, density: bool = True, trainable: bool = True) -> "SetConvConfig":
        return cls(Tensor(math.log(lengthscale), requires_grad=trainable), density)

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale.data))


def set_conv(context_x, context_y, queries, cfg: SetConvConfig) -> Tensor:
    """Evaluate the SetConv of a context set at ``queries``.

    ``context_x`` (C, D), ``context_y`` (C, P) and ``queries`` (Q, D).  Row ``q``
    is ``sum_c (1, y_c) * w(|x_q - x_c|)`` with the density channel first when
    ``cfg.density`` is set, otherwise just the weighted sum of values.
    """
    q = np.atleast_2d(np.asarray(queries, float))
    if q.shape[0] == 0:
        raise DimensionError("set_conv needs at least one query")
    cy = _lift(context_y)
    cx = np.asarray(context_x, float).reshape(cy.shape[0], -1) if cy.shape[0] else np.zeros((0, q.shape[1]))
    if cy.ndim == 1:
        cy = cy.reshape(-1, 1)
    sq = ((q[:, None, :] - cx[None, :, :]) ** 2).sum(-1)  # (Q, C)
    w = T.exp(Tensor(-sq) * T.exp(-2.0 * cfg.log_lengthscale))
    vals = T.concat([Tensor(np.ones((cy.shape[0], 1))), cy], axis=1) if cfg.density else cy
    if cy.shape[0] == 0:
        return Tensor(np.zeros((q.shape[0], vals.shape[1]))) + 0.0 * cfg.log_lengthscale
    return w @ vals


@dataclass
class ConvLayer:
    kernel: Tensor  # (C_out, C_in, k) or (C_out, C_in, k, k)
    bias: Tensor  # (C_out,)
    residual: bool = False


@dataclass
class GridCNNParams:
    layers: list
    activation: str = "relu"

    @classmethod
    def init(cls, channels, kernel_size: int, rng: np.random.Generator, ndim: int = 2,
             residual: bool = False, activation: str = "relu") -> "GridCNNParams":
        """``channels`` is ``[C_0, C_1, ..., C_n]``; residual only where C_in == C_out."""
        layers = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            shape = (c_out, c_in) + (kernel_size,) * ndim
            fan_in = c_in * kernel_size**ndim
            k = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True)
            b = Tensor(np.zeros(c_out), requires_grad=True)
            layers.append(ConvLayer(k, b, residual=residual and c_in == c_out))
        return cls(layers, activation)

    def parameters(self, prefix: str = "cnn") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.kernel"] = layer.kernel
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out


def grid_cnn_forward(params: GridCNNParams, signal) -> Tensor:
    """Same-padded CNN over ``(C, L)`` or ``(C, H, W)``; no activation after the last layer."""
    h = _lift(signal)
    conv = T.conv1d if h.ndim == 2 else T.conv2d
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        if layer.kernel.shape[1] != h.shape[0]:
            raise DimensionError(f"layer {i} expects {layer.kernel.shape[1]} channels, got {h.shape[0]}")
        if layer.residual and layer.kernel.shape[0] != h.shape[0]:
            raise DimensionError(f"residual layer {i} changes channel count")
        out = conv(h, layer.kernel) + layer.bias.reshape((-1,) + (1,) * (h.ndim - 1))
        if i < last:
            out = T.activation(out, params.activation)
        h = out + h if layer.residual else out
    return h
