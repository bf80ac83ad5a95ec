"""Variational autoencoder for zero-inflated count matrices.

Subpackages: ``autodiff`` (reverse-mode engine), ``distributions`` (ZINB/KL
primitives), ``model`` (encoder/decoder + loss + checkpoints), ``training``
(Adam loop), ``evaluation`` (benchmarks + FA baseline), ``diffexpr``
(Bayes-factor test), ``data`` (loaders + simulator), ``cli``.
"""

from .data import ExpressionMatrix, SimulationSpec, simulate
from .distributions import DiagGaussian, ZinbParams, nb_log_pmf, zinb_log_pmf
from .model import ModelConfig, decode, elbo_loss, encode, init_params, load_checkpoint, save_checkpoint
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "ExpressionMatrix",
    "SimulationSpec",
    "simulate",
    "DiagGaussian",
    "ZinbParams",
    "nb_log_pmf",
    "zinb_log_pmf",
    "ModelConfig",
    "encode",
    "decode",
    "elbo_loss",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "TrainingConfig",
    "train",
    "__version__",
]
