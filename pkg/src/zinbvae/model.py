"""Encoder/decoder pair over the latent space, the variational training loss,
and checkpointing.

The encoder maps log(1+counts) (optionally concatenated with per-cell
covariates) through a fully connected trunk to a diagonal-Gaussian posterior
over the latent space. The decoder shares one trunk across its three heads:
NB log-mean, NB log-inverse-dispersion (a free per-gene vector by default),
and the dropout logit. Trunk layers are affine -> batch norm -> ReLU ->
dropout.

The loss is the negative evidence lower bound: per cell, minus the summed
entrywise zero-inflated NB log-likelihood at a single reparameterized latent
draw, plus the KL of the posterior to the standard-normal prior. In
``point-mass`` latent mode the latent is the posterior mean and the KL term is
dropped, which turns the latent into a per-cell point estimate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tape, Tensor, parameter
from .distributions import (
    DiagGaussian,
    ZinbParams,
    kl_std_normal_on_tape,
    zinb_log_pmf_on_tape,
)
from .errors import ConfigError, NumericalError, ShapeError
from .serialize import read_array_container, write_array_container

DISPERSION_MODES = ("per-gene", "per-entry")
LATENT_MODES = ("stochastic", "point-mass")
LOG_SCALE_CLAMP = 30.0  # keeps decoded means/dispersions in (e^-30, e^30)


@dataclass
class ModelConfig:
    n_genes: int
    latent_dim: int = 10
    hidden_width: int = 128
    hidden_depth: int = 3
    dropout_rate: float = 0.1
    covariate_dim: int = 0
    dispersion_mode: str = "per-gene"
    latent_mode: str = "stochastic"
    encoder_sees_covariates: bool = False

    def __post_init__(self):
        if self.n_genes < 1:
            raise ConfigError("n_genes must be >= 1")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.hidden_depth < 1:
            raise ConfigError("hidden_depth must be >= 1")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.covariate_dim < 0:
            raise ConfigError("covariate_dim must be >= 0")
        if self.dispersion_mode not in DISPERSION_MODES:
            raise ConfigError(f"dispersion_mode must be one of {DISPERSION_MODES}")
        if self.latent_mode not in LATENT_MODES:
            raise ConfigError(f"latent_mode must be one of {LATENT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """All trainable weights plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def trainable_names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [self.tensors[name] for name in self.trainable_names()]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: parameter(v.data.copy()) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: glorot-uniform weights, zero biases, unit batch-norm
    scale; the latent log-variance head bias starts at -1."""
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def trunk(prefix: str, d_in: int):
        d = d_in
        for i in range(config.hidden_depth):
            tensors[f"{prefix}.lin{i}.w"] = parameter(_glorot(rng, d, config.hidden_width))
            tensors[f"{prefix}.lin{i}.b"] = parameter(np.zeros(config.hidden_width))
            tensors[f"{prefix}.bn{i}.gamma"] = parameter(np.ones(config.hidden_width))
            tensors[f"{prefix}.bn{i}.beta"] = parameter(np.zeros(config.hidden_width))
            buffers[f"{prefix}.bn{i}.mean"] = np.zeros(config.hidden_width)
            buffers[f"{prefix}.bn{i}.var"] = np.ones(config.hidden_width)
            d = config.hidden_width
        return d

    enc_in = config.n_genes + (config.covariate_dim if config.encoder_sees_covariates else 0)
    width = trunk("enc", enc_in)
    tensors["enc.mean.w"] = parameter(_glorot(rng, width, config.latent_dim))
    tensors["enc.mean.b"] = parameter(np.zeros(config.latent_dim))
    tensors["enc.logvar.w"] = parameter(_glorot(rng, width, config.latent_dim))
    tensors["enc.logvar.b"] = parameter(np.full(config.latent_dim, -1.0))

    dec_in = config.latent_dim + config.covariate_dim
    width = trunk("dec", dec_in)
    tensors["dec.mu.w"] = parameter(_glorot(rng, width, config.n_genes))
    tensors["dec.mu.b"] = parameter(np.zeros(config.n_genes))
    if config.dispersion_mode == "per-gene":
        tensors["dec.log_theta"] = parameter(np.zeros(config.n_genes))
    else:
        tensors["dec.theta.w"] = parameter(_glorot(rng, width, config.n_genes))
        tensors["dec.theta.b"] = parameter(np.zeros(config.n_genes))
    tensors["dec.pi.w"] = parameter(_glorot(rng, width, config.n_genes))
    tensors["dec.pi.b"] = parameter(np.zeros(config.n_genes))
    return ModelParams(config, tensors, buffers)


def _as_batch(x: np.ndarray, n_cols: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise ShapeError(f"{what}: expected {n_cols} columns, got shape {arr.shape}")
    return arr, single


def _covariate_batch(covariates, n_rows: int, config: ModelConfig) -> np.ndarray | None:
    if config.covariate_dim == 0:
        return None
    if covariates is None:
        raise ShapeError(f"model expects {config.covariate_dim} covariate columns, got none")
    cov, _ = _as_batch(covariates, config.covariate_dim, "covariates")
    if cov.shape[0] != n_rows:
        raise ShapeError(f"covariates rows {cov.shape[0]} != cell rows {n_rows}")
    return cov


def _run_trunk(tape, params, prefix, h, mode, rng):
    cfg = params.config
    for i in range(cfg.hidden_depth):
        h = tape.affine(h, params.tensors[f"{prefix}.lin{i}.w"], params.tensors[f"{prefix}.lin{i}.b"])
        h = tape.batch_norm(
            h,
            params.tensors[f"{prefix}.bn{i}.gamma"],
            params.tensors[f"{prefix}.bn{i}.beta"],
            params.buffers[f"{prefix}.bn{i}.mean"],
            params.buffers[f"{prefix}.bn{i}.var"],
            mode=mode,
        )
        h = tape.relu(h)
        h = tape.dropout(h, cfg.dropout_rate, mode, rng)
    return h


def encoder_forward(tape, params, counts, covariates, mode, rng):
    """Tape forward pass; returns (posterior mean, posterior log-variance)."""
    cfg = params.config
    h_data = np.log1p(counts)
    if cfg.encoder_sees_covariates and cfg.covariate_dim > 0:
        h_data = np.concatenate([h_data, covariates], axis=1)
    h = _run_trunk(tape, params, "enc", Tensor(h_data), mode, rng)
    mean = tape.affine(h, params.tensors["enc.mean.w"], params.tensors["enc.mean.b"])
    log_var = tape.affine(h, params.tensors["enc.logvar.w"], params.tensors["enc.logvar.b"])
    return mean, log_var


def decoder_forward(tape, params, z, covariates, mode, rng):
    """Tape forward pass; returns (log mu, log theta, pi logit)."""
    cfg = params.config
    h = z if covariates is None else tape.concat_cols([z, Tensor(covariates)])
    h = _run_trunk(tape, params, "dec", h, mode, rng)
    log_mu = tape.clip(
        tape.affine(h, params.tensors["dec.mu.w"], params.tensors["dec.mu.b"]),
        -LOG_SCALE_CLAMP,
        LOG_SCALE_CLAMP,
    )
    if cfg.dispersion_mode == "per-gene":
        log_theta = tape.clip(params.tensors["dec.log_theta"], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    else:
        log_theta = tape.clip(
            tape.affine(h, params.tensors["dec.theta.w"], params.tensors["dec.theta.b"]),
            -LOG_SCALE_CLAMP,
            LOG_SCALE_CLAMP,
        )
    pi_logit = tape.affine(h, params.tensors["dec.pi.w"], params.tensors["dec.pi.b"])
    return log_mu, log_theta, pi_logit


def encode(counts, covariates, params: ModelParams, mode: str = "eval", rng=None) -> DiagGaussian:
    """Posterior q(z | x, covariates). Accepts one cell (1-D) or a batch."""
    cfg = params.config
    x, single = _as_batch(counts, cfg.n_genes, "counts")
    cov = (
        _covariate_batch(covariates, x.shape[0], cfg)
        if cfg.encoder_sees_covariates and cfg.covariate_dim
        else None
    )
    if mode == "train" and rng is None:
        raise ValueError("encode in train mode needs an rng for dropout")
    tape = Tape()
    mean, log_var = encoder_forward(tape, params, x, cov, mode, rng)
    std = np.exp(np.clip(0.5 * log_var.data, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
    if single:
        return DiagGaussian(mean.data[0], std[0])
    return DiagGaussian(mean.data, std)


def decode(z, covariates, params: ModelParams, mode: str = "eval", rng=None) -> ZinbParams:
    """Per-gene ZINB parameters decoded from latent vector(s)."""
    cfg = params.config
    zb, single = _as_batch(z, cfg.latent_dim, "latent")
    cov = _covariate_batch(covariates, zb.shape[0], cfg)
    if mode == "train" and rng is None:
        raise ValueError("decode in train mode needs an rng for dropout")
    tape = Tape()
    log_mu, log_theta, pi_logit = decoder_forward(tape, params, Tensor(zb), cov, mode, rng)
    mu = np.exp(log_mu.data)
    theta = np.exp(log_theta.data)
    pi = _stable_sigmoid(pi_logit.data)
    if single:
        mu, pi = mu[0], pi[0]
        if theta.ndim == 2:
            theta = theta[0]
    return ZinbParams(mu=mu, theta=theta, pi=pi)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elbo_loss(counts, covariates, params: ModelParams, rng, mode: str = "train"):
    """Negative ELBO of a batch, built on a fresh tape.

    Returns (loss, tape, parts) where loss is a scalar tensor: the batch mean
    of -sum_g log ZINB(x_g) + KL (KL identically zero in point-mass mode), and
    parts holds the float means of the two terms. The rng drives dropout masks
    and the latent draw, in that order.
    """
    cfg = params.config
    x = np.asarray(counts, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("elbo_loss expects a nonempty (cells, genes) batch")
    if x.shape[1] != cfg.n_genes:
        raise ShapeError(f"batch has {x.shape[1]} genes, model expects {cfg.n_genes}")
    cov = _covariate_batch(covariates, x.shape[0], cfg)
    enc_cov = cov if cfg.encoder_sees_covariates else None

    tape = Tape()
    try:
        mean, log_var = encoder_forward(tape, params, x, enc_cov, mode, rng)
        if cfg.latent_mode == "stochastic":
            std = tape.exp(tape.mul(log_var, Tensor(0.5)))
            eps = Tensor(rng.standard_normal(mean.data.shape))
            z = tape.add(mean, tape.mul(std, eps))
            kl = kl_std_normal_on_tape(tape, mean, log_var)
        else:
            z = mean
            kl = None
        log_mu, log_theta, pi_logit = decoder_forward(tape, params, z, cov, mode, rng)
        log_lik = zinb_log_pmf_on_tape(tape, x, log_mu, log_theta, pi_logit)
        recon = tape.sum(log_lik, axis=1)
        per_cell = tape.sub(kl, recon) if kl is not None else tape.neg(recon)
        loss = tape.mean(per_cell)
    except NumericalError as err:
        bad = _probe_bad_cell(x, cov, params)
        where = f"cell index {bad}" if bad is not None else "unlocated cell"
        raise NumericalError(f"non-finite value in ELBO forward ({where}): {err}") from err
    parts = {
        "recon": float(recon.data.mean()),
        "kl": float(kl.data.mean()) if kl is not None else 0.0,
    }
    return loss, tape, parts


def _probe_bad_cell(x, cov, params):
    """Best-effort eval-mode scan for the first cell whose forward pass goes
    non-finite, for error diagnostics."""
    for i in range(x.shape[0]):
        try:
            cov_i = None if cov is None else cov[i]
            q = encode(x[i], cov_i, params, mode="eval")
            if not (np.all(np.isfinite(q.mean)) and np.all(np.isfinite(q.std))):
                return i
            p = decode(q.mean, cov_i, params, mode="eval")
            if not (
                np.all(np.isfinite(p.mu))
                and np.all(np.isfinite(p.theta))
                and np.all(np.isfinite(p.pi))
            ):
                return i
        except (NumericalError, ValueError):
            return i
    return None


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path):
    arrays = {f"param/{k}": t.data for k, t in params.tensors.items()}
    arrays.update({f"buffer/{k}": v for k, v in params.buffers.items()})
    write_array_container(
        path,
        arrays,
        extra_header={"kind": "model_checkpoint", "config": params.config.to_dict()},
    )


def load_checkpoint(path) -> ModelParams:
    header, arrays = read_array_container(path)
    if header.get("kind") != "model_checkpoint":
        raise ConfigError(f"{path}: container is not a model checkpoint")
    config = ModelConfig.from_dict(header["config"])
    tensors, buffers = {}, {}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            tensors[key] = parameter(arr)
        elif kind == "buffer":
            buffers[key] = np.array(arr)
        else:
            raise ConfigError(f"{path}: unknown array kind {kind!r}")
    return ModelParams(config, tensors, buffers)
