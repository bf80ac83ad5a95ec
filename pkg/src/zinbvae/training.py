"""Minibatch optimization of the variational loss: Adam with bias correction,
seeded epoch shuffling, loss monitoring, checkpointing.

Everything is deterministic given (seed, data, configs): parameter init,
batch order, dropout masks, and latent draws all derive from one generator,
so two runs with the same inputs produce bit-identical checkpoints on a
single thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .model import ModelConfig, ModelParams, elbo_loss, init_params, save_checkpoint


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two rows)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")


class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.step = 0


def adam_step(params: ModelParams, grads: dict[int, np.ndarray], state: AdamState, config: TrainingConfig):
    """One in-place Adam update from a gradient map keyed by tensor id."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    lr, eps = config.learning_rate, config.adam_eps
    for name in params.trainable_names():
        tensor = params.tensors[name]
        g = grads.get(tensor.tid)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _epoch_batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Contiguous slices of the (shuffled) order; a trailing remainder of one
    cell is folded into the previous batch because train-mode batch norm
    needs at least two rows. Every cell is consumed exactly once."""
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train(
    data,
    covariates,
    model_config: ModelConfig,
    training_config: TrainingConfig,
    checkpoint_path=None,
    progress=None,
):
    """Optimize a fresh model on a count matrix.

    ``data`` is an ExpressionMatrix (or a bare counts array); ``covariates``
    is the per-cell covariate matrix or None. Returns (params, trace) where
    trace[e] is the mean per-cell negative ELBO of epoch e. Emits a checkpoint
    at the end when ``checkpoint_path`` is given. Aborts with the epoch/batch
    position on divergence.
    """
    counts = data.counts if hasattr(data, "counts") else np.asarray(data, dtype=np.float64)
    n = counts.shape[0]
    if n == 0:
        raise ValueError("train: empty dataset")
    if counts.shape[1] != model_config.n_genes:
        raise ConfigError(
            f"data has {counts.shape[1]} genes, model config expects {model_config.n_genes}"
        )
    if n == 1 and training_config.epochs > 0:
        raise ValueError("train: need at least 2 cells for batch normalization")
    rng = np.random.default_rng(training_config.seed)
    params = init_params(model_config, rng)
    state = AdamState(params)
    leaves = params.trainable()
    trace: list[float] = []
    for epoch in range(training_config.epochs):
        order = rng.permutation(n) if training_config.shuffle else np.arange(n)
        total = 0.0
        for batch_index, idx in enumerate(_epoch_batches(n, training_config.batch_size, order)):
            x = counts[idx]
            cov = covariates[idx] if covariates is not None else None
            try:
                loss, tape, _ = elbo_loss(x, cov, params, rng, mode="train")
                grads = tape.backward(loss, leaves=leaves)
                adam_step(params, grads, state, training_config)
            except NumericalError as err:
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: {err}"
                ) from err
            total += float(loss.data) * len(idx)
        trace.append(total / n)
        if progress is not None:
            progress(epoch, trace[-1])
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, trace


def write_loss_trace(trace: list[float], path, header_comment: str | None = None):
    """Loss trace CSV: one (epoch, mean_neg_elbo) row per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("epoch,mean_neg_elbo\n")
        for epoch, value in enumerate(trace):
            fh.write(f"{epoch},{value!r}\n")
