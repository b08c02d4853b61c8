"""Conditional neural-process baselines: CNP and two ConvCNP variants.

All models expose ``predict(context, target_x) -> (mean, var)`` with Tensors of
shape ``(T, P)``, and ``parameters()`` for the optimiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Task
from .distributions import LOG_2PI, clamp_log_var
from .errors import DimensionError
from .networks import (
    ConvLayer,
    GridCNNParams,
    MLPParams,
    SetConvConfig,
    grid_cnn_forward,
    mlp_forward,
    set_conv,
)
from .tensor import Tensor, _lift

VAR_FLOOR = 1e-6


def _gaussian_head(h: Tensor, p: int) -> tuple[Tensor, Tensor]:
    mean = h[..., :p]
    var = T.exp(clamp_log_var(h[..., p:])) + VAR_FLOOR
    return mean, var


def np_log_likelihood(mean, var, y) -> Tensor:
    """Sum of independent Gaussian log densities of ``y`` under ``(mean, var)``."""
    mean, var = _lift(mean), _lift(var)
    y = np.asarray(y, dtype=np.float64)
    if mean.shape != var.shape or y.shape != mean.shape:
        raise DimensionError(f"prediction {mean.shape}/{var.shape} and targets {y.shape} disagree")
    return ((mean - y) ** 2 / var + T.log(var) + LOG_2PI).sum() * -0.5


@dataclass
class CNPModel:
    encoder: MLPParams
    decoder: MLPParams
    in_dim: int
    out_dim: int
    kind: str = "cnp"

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rep_dim: int, hidden, rng: np.random.Generator) -> "CNPModel":
        enc = MLPParams.init([in_dim + out_dim, *hidden, rep_dim], rng)
        dec = MLPParams.init([rep_dim + in_dim, *hidden, 2 * out_dim], rng)
        return cls(enc, dec, in_dim, out_dim)

    @property
    def rep_dim(self) -> int:
        return self.encoder.widths[-1]

    def parameters(self) -> dict:
        return {**self.encoder.parameters("cnp.enc"), **self.decoder.parameters("cnp.dec")}

    def represent(self, context: Task) -> Tensor:
        if len(context) == 0:
            return Tensor(np.zeros(self.rep_dim))
        if context.in_dim != self.in_dim or context.out_dim != self.out_dim:
            raise DimensionError(f"context dims ({context.in_dim}, {context.out_dim}) do not match model")
        r = mlp_forward(self.encoder, np.concatenate([context.X, context.Y], axis=1))
        return r.mean(axis=0)

    def decode(self, rep: Tensor, target_x) -> tuple[Tensor, Tensor]:
        tx = np.asarray(target_x, dtype=np.float64).reshape(-1, self.in_dim)
        tiled = rep.reshape(1, -1) * np.ones((tx.shape[0], 1))
        h = mlp_forward(self.decoder, T.concat([tiled, Tensor(tx)], axis=1))
        return _gaussian_head(h, self.out_dim)

    def predict(self, context: Task, target_x) -> tuple[Tensor, Tensor]:
        return self.decode(self.represent(context), target_x)


def cnp_predict(model: CNPModel, context: Task, target_x):
    return model.predict(context, target_x)


def grid_points(lo: float, hi: float, points_per_unit: int) -> np.ndarray:
    """Grid of multiples of ``1/points_per_unit`` covering ``[lo, hi]``.

    Anchoring at multiples keeps grids of shifted inputs aligned cell-for-cell.
    """
    start = math.floor(lo * points_per_unit)
    stop = math.ceil(hi * points_per_unit)
    return np.arange(start, stop + 1, dtype=np.float64) / points_per_unit


@dataclass
class ConvCNPModel:
    """ConvCNP in one of two variants.

    ``off_grid_1d``: SetConv onto a uniform grid, CNN, SetConv back to the
    targets, pointwise MLP decoder.  ``on_grid_2d``: image values and the
    observation mask form a two-channel grid, a CNN runs over it and a
    per-pixel MLP emits the likelihood parameters.
    """

    variant: str
    cnn: GridCNNParams
    decoder: MLPParams
    out_dim: int = 1
    input_setconv: SetConvConfig | None = None
    output_setconv: SetConvConfig | None = None
    points_per_unit: int = 32
    margin: float = 0.1
    grid_shape: tuple | None = None
    kind: str = "convcnp"

    @classmethod
    def off_grid_1d(cls, rng: np.random.Generator, channels=(16, 32, 16), kernel_size: int = 11,
                    points_per_unit: int = 32, lengthscale: float = 0.096, hidden=(32,),
                    out_dim: int = 1, margin: float = 0.1) -> "ConvCNPModel":
        cnn = GridCNNParams.init([1 + out_dim, *channels], kernel_size, rng, ndim=1)
        dec = MLPParams.init([channels[-1], *hidden, 2 * out_dim], rng)
        return cls("off_grid_1d", cnn, dec, out_dim, SetConvConfig.init(lengthscale, density=True),
                   SetConvConfig.init(lengthscale, density=False), points_per_unit, margin)

    @classmethod
    def on_grid_2d(cls, rng: np.random.Generator, grid_shape, channels: int = 32, depth: int = 3,
                   io_kernel: int = 5, kernel_size: int = 3, hidden=(32,), out_dim: int = 1) -> "ConvCNPModel":
        def layer(c_in, c_out, k, residual):
            fan_in = c_in * k * k
            kern = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c_out, c_in, k, k)), requires_grad=True)
            return ConvLayer(kern, Tensor(np.zeros(c_out), requires_grad=True), residual)

        layers = [layer(2 * out_dim, channels, io_kernel, False)]
        layers += [layer(channels, channels, kernel_size, True) for _ in range(depth)]
        layers.append(layer(channels, channels, io_kernel, False))
        dec = MLPParams.init([channels, *hidden, 2 * out_dim], rng)
        return cls("on_grid_2d", GridCNNParams(layers), dec, out_dim, grid_shape=tuple(grid_shape))

    def parameters(self) -> dict:
        out = {**self.cnn.parameters("convcnp.cnn"), **self.decoder.parameters("convcnp.dec")}
        if self.input_setconv is not None and self.input_setconv.log_lengthscale.requires_grad:
            out["convcnp.in_log_ls"] = self.input_setconv.log_lengthscale
        if self.output_setconv is not None and self.output_setconv.log_lengthscale.requires_grad:
            out["convcnp.out_log_ls"] = self.output_setconv.log_lengthscale
        return out

    def predict(self, context: Task, target_x) -> tuple[Tensor, Tensor]:
        if self.variant == "off_grid_1d":
            return self._predict_off_grid(context, target_x)
        if self.variant == "on_grid_2d":
            return self._predict_on_grid(context, target_x)
        raise ValueError(f"unknown ConvCNP variant {self.variant!r}")

    def _predict_off_grid(self, context: Task, target_x):
        tx = np.asarray(target_x, dtype=np.float64).reshape(-1, 1)
        if len(context) and (context.in_dim != 1 or context.out_dim != self.out_dim):
            raise DimensionError("off-grid ConvCNP handles 1-D inputs only")
        xs = np.concatenate([context.X[:, 0], tx[:, 0]]) if len(context) else tx[:, 0]
        grid = grid_points(xs.min() - self.margin, xs.max() + self.margin, self.points_per_unit)
        h = set_conv(context.X, context.Y, grid[:, None], self.input_setconv)  # (G, 1+P)
        density = h[:, :1]
        h = T.concat([density, h[:, 1:] / (density + 1e-8)], axis=1)
        h = grid_cnn_forward(self.cnn, h.T)  # (C, G)
        feats = set_conv(grid[:, None], h.T, tx, self.output_setconv)  # (T, C)
        out = mlp_forward(self.decoder, T.relu(feats))
        return _gaussian_head(out, self.out_dim)

    def _pixel_index(self, x) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.grid_shape
        x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
        i = np.rint((x[:, 0] + 1.0) * (h - 1) / 2.0).astype(int)
        j = np.rint((x[:, 1] + 1.0) * (w - 1) / 2.0).astype(int)
        if np.any((i < 0) | (i >= h) | (j < 0) | (j >= w)):
            raise DimensionError("pixel coordinates fall outside the image grid")
        return i, j

    def _predict_on_grid(self, context: Task, target_x):
        h, w = self.grid_shape
        p = self.out_dim
        grid = np.zeros((2 * p, h, w))
        if len(context):
            if context.in_dim != 2 or context.out_dim != p:
                raise DimensionError("on-grid ConvCNP expects 2-D pixel coordinates")
            i, j = self._pixel_index(context.X)
            grid[:p, i, j] = 1.0
            grid[p:, i, j] = context.Y.T
        feats = grid_cnn_forward(self.cnn, Tensor(grid))  # (C, H, W)
        ti, tj = self._pixel_index(target_x)
        flat = feats.reshape(feats.shape[0], -1).T  # (H*W, C)
        chosen = flat[ti * w + tj]
        out = mlp_forward(self.decoder, T.relu(chosen))
        return _gaussian_head(out, p)


def convcnp_predict(model: ConvCNPModel, context: Task, target_x):
    return model.predict(context, target_x)
