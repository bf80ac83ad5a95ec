"""Probability primitives for the count model.

Two layers live here:

* pure numpy functions (``nb_log_pmf``, ``zinb_log_pmf``, KL, samplers) used
  by evaluation code and by the simulator checks;
* tape-based builders (``zinb_log_pmf_on_tape``, ``kl_std_normal_on_tape``)
  that assemble the same formulas from autodiff primitives so the training
  loss is differentiable. The two layers are cross-checked in the tests.

The negative binomial is parameterized by (mean mu, inverse-dispersion theta),
i.e. the Gamma(shape=theta, rate=theta/mu) -> Poisson marginal, so
variance = mu + mu^2/theta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .special import log_gamma, sigmoid, softplus


@dataclass
class ZinbParams:
    """Per-entry zero-inflated negative binomial parameters.

    mu > 0 is the NB mean, theta > 0 the inverse-dispersion, pi in [0, 1]
    the extra zero mass. Fields may be scalars or arrays of a common shape.
    """

    mu: np.ndarray
    theta: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if np.any(self.mu <= 0) or not np.all(np.isfinite(self.mu)):
            raise ValueError("ZinbParams: mu must be finite and > 0")
        if np.any(self.theta <= 0) or not np.all(np.isfinite(self.theta)):
            raise ValueError("ZinbParams: theta must be finite and > 0")
        if np.any(self.pi < 0) or np.any(self.pi > 1) or not np.all(np.isfinite(self.pi)):
            raise ValueError("ZinbParams: pi must lie in [0, 1]")


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by mean and standard-deviation arrays.

    Encoder posteriors always have strictly positive std; the degenerate
    std = 0 boundary is accepted so the reparameterized sampler can return
    the mean exactly.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("DiagGaussian: mean and std shapes differ")
        if np.any(self.std < 0) or not np.all(np.isfinite(self.std)):
            raise ValueError("DiagGaussian: std must be finite and >= 0")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("DiagGaussian: mean must be finite")


def nb_log_pmf(k, mu, theta):
    """Negative binomial log-pmf at counts k, computed in log space."""
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("nb_log_pmf: counts must be >= 0")
    if np.any(mu <= 0) or np.any(theta <= 0):
        raise ValueError("nb_log_pmf: mu and theta must be > 0")
    log_theta_mu = np.log(theta + mu)
    out = (
        log_gamma(k + theta)
        - log_gamma(theta)
        - log_gamma(k + 1.0)
        + theta * (np.log(theta) - log_theta_mu)
        + k * (np.log(mu) - log_theta_mu)
    )
    return out if np.ndim(out) else float(out)


def zinb_log_pmf(k, params: ZinbParams):
    """Zero-inflated NB log-pmf; the k = 0 atom is merged in log space.

    pi = 1 with k > 0 yields -inf (log of zero), not an error.
    """
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("zinb_log_pmf: counts must be >= 0")
    mu, theta, pi = params.mu, params.theta, params.pi
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
        log_1mpi = np.log1p(-pi)
    nb = nb_log_pmf(k, mu, theta)
    # where k == 0, nb is the NB zero mass, so the atom can be merged in log
    # space; with pi = 0 this reduces to nb bit-for-bit
    case_zero = np.logaddexp(log_pi, log_1mpi + nb)
    case_pos = log_1mpi + nb
    out = np.where(k == 0, case_zero, case_pos)
    return out if np.ndim(out) else float(out)


def kl_diag_gaussian_to_standard(q: DiagGaussian):
    """KL(q || N(0, I)), summed over the last axis."""
    var = q.std * q.std
    with np.errstate(divide="ignore"):
        log_var = np.where(q.std > 0, 2.0 * np.log(np.maximum(q.std, 1e-300)), -np.inf)
    per_dim = 0.5 * (q.mean * q.mean + var - 1.0 - log_var)
    out = per_dim.sum(axis=-1)
    return out if np.ndim(out) else float(out)


def diag_gaussian_log_pdf(x, q: DiagGaussian):
    """Log density of x under a diagonal Gaussian, summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    z = (x - q.mean) / q.std
    out = -0.5 * (z * z + np.log(2.0 * np.pi)).sum(axis=-1) - np.log(q.std).sum(axis=-1)
    return out if np.ndim(out) else float(out)


def standard_normal_log_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = -0.5 * (x * x + np.log(2.0 * np.pi)).sum(axis=-1)
    return out if np.ndim(out) else float(out)


def sample_gaussian(q: DiagGaussian, rng: np.random.Generator, size: int | None = None):
    """Reparameterized draw mean + std * eps. With ``size`` given, returns
    ``size`` stacked draws along a new leading axis."""
    shape = q.mean.shape if size is None else (size, *q.mean.shape)
    eps = rng.standard_normal(shape)
    return q.mean + q.std * eps


def sample_gamma(shape, rate, rng: np.random.Generator, size=None):
    """Gamma(shape, rate) draws with mean shape/rate."""
    shape = np.asarray(shape, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("sample_gamma: shape and rate must be > 0")
    return rng.gamma(shape, 1.0 / rate, size=size)


# ---------------------------------------------------------------------------
# tape builders (differentiable variants used by the training loss)
# ---------------------------------------------------------------------------


def zinb_log_pmf_on_tape(
    tape: Tape,
    counts: np.ndarray,
    log_mu: Tensor,
    log_theta: Tensor,
    pi_logit: Tensor,
) -> Tensor:
    """Entrywise ZINB log-pmf of a constant count matrix, differentiable in
    (log mu, log theta, pi logit). Shapes broadcast; counts is (n, g)."""
    counts = np.asarray(counts, dtype=np.float64)
    theta = tape.exp(log_theta)
    log_theta_mu = tape.logaddexp(log_theta, log_mu)
    nb_zero = tape.mul(theta, tape.sub(log_theta, log_theta_mu))
    sp_logit = tape.softplus(pi_logit)
    case_zero = tape.sub(tape.logaddexp(pi_logit, nb_zero), sp_logit)
    case_pos = tape.sub(
        tape.add(
            tape.sub(tape.lgamma(tape.add(Tensor(counts), theta)), tape.lgamma(theta)),
            tape.add(nb_zero, tape.mul(Tensor(counts), tape.sub(log_mu, log_theta_mu))),
        ),
        tape.add(sp_logit, Tensor(log_gamma(counts + 1.0))),
    )
    return tape.select(counts == 0, case_zero, case_pos)


def kl_std_normal_on_tape(tape: Tape, mean: Tensor, log_var: Tensor) -> Tensor:
    """Per-row KL(N(mean, diag exp(log_var)) || N(0, I)) for 2-D inputs."""
    inner = tape.sub(
        tape.add(tape.mul(mean, mean), tape.exp(log_var)),
        tape.add(Tensor(np.ones_like(mean.data)), log_var),
    )
    return tape.mul(tape.sum(inner, axis=1), Tensor(0.5))


def zinb_log_pmf_from_logit(k, mu, theta, pi_logit):
    """Pure-numpy ZINB log-pmf with the zero-inflation given as a logit.

    Mirrors ``zinb_log_pmf_on_tape`` exactly (same formula, same clamps are
    unnecessary here because nothing is exponentiated beyond logaddexp).
    """
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    pi_logit = np.asarray(pi_logit, dtype=np.float64)
    log_mu = np.log(mu)
    log_theta = np.log(theta)
    log_theta_mu = np.logaddexp(log_theta, log_mu)
    nb_zero = theta * (log_theta - log_theta_mu)
    sp = softplus(pi_logit)
    case_zero = np.logaddexp(pi_logit, nb_zero) - sp
    case_pos = (
        -sp
        + log_gamma(k + theta)
        - log_gamma(theta)
        - log_gamma(k + 1.0)
        + nb_zero
        + k * (log_mu - log_theta_mu)
    )
    out = np.where(k == 0, case_zero, case_pos)
    return out if np.ndim(out) else float(out)


def zinb_zero_probability(mu, theta, pi):
    """P(X = 0) = pi + (1 - pi) (theta / (theta + mu))^theta."""
    nb_zero = np.exp(np.asarray(theta) * (np.log(theta) - np.log(np.asarray(theta) + mu)))
    return pi + (1.0 - np.asarray(pi)) * nb_zero


__all__ = [
    "ZinbParams",
    "DiagGaussian",
    "nb_log_pmf",
    "zinb_log_pmf",
    "zinb_log_pmf_from_logit",
    "zinb_zero_probability",
    "kl_diag_gaussian_to_standard",
    "diag_gaussian_log_pdf",
    "standard_normal_log_pdf",
    "sample_gaussian",
    "sample_gamma",
    "zinb_log_pmf_on_tape",
    "kl_std_normal_on_tape",
    "sigmoid",
]
