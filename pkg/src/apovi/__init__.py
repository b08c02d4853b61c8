"""Amortised pseudo-observation variational inference for Bayesian neural networks.

The package is organised bottom-up: ``tensor`` (reverse-mode autodiff),
``distributions`` (Gaussian algebra), ``networks`` (deterministic layers),
``posteriors`` (MFVI, AMFVI, POVI, APOVI), ``neural_processes`` (CNP and
ConvCNP baselines), ``training`` (objectives and meta-training), ``data``
(task generators and IDX reading) and ``experiments``/``cli`` (orchestration).
"""

from .data import KernelSpec, Task
from .posteriors import (
    AMFVIModel,
    APOVIModel,
    BernoulliLikelihood,
    BNNConfig,
    GaussianLikelihood,
    MFVIModel,
    POVIModel,
    predict,
)
from .tensor import Tensor
from .training import TrainConfig, meta_train

__all__ = [
    "AMFVIModel",
    "APOVIModel",
    "BNNConfig",
    "BernoulliLikelihood",
    "GaussianLikelihood",
    "KernelSpec",
    "MFVIModel",
    "POVIModel",
    "Task",
    "Tensor",
    "TrainConfig",
    "meta_train",
    "predict",
]

__version__ = "0.1.0"
