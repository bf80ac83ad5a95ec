"""Benchmarks over a trained model: held-out marginal likelihood via
importance sampling, corruption/imputation scoring, silhouette, the
unwanted-variation correlation metric, and a factor-analysis baseline fit by
EM (which doubles as the analytic oracle for the importance sampler, since
its marginal likelihood is closed-form).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ExpressionMatrix
from .distributions import (
    DiagGaussian,
    ZinbParams,
    diag_gaussian_log_pdf,
    sample_gaussian,
    standard_normal_log_pdf,
    zinb_log_pmf,
)
from .errors import NumericalError
from .model import ModelParams, decode, encode
from .special import log_sum_exp


# ---------------------------------------------------------------------------
# importance-sampling marginal likelihood
# ---------------------------------------------------------------------------


def importance_log_marginal(
    proposal: DiagGaussian,
    log_lik_fn,
    n_samples: int,
    rng: np.random.Generator,
    chunk: int = 2000,
) -> float:
    """log p(x) ~= log mean_s exp(log p(x|z_s) + log p(z_s) - log q(z_s))
    with z_s drawn from the diagonal-Gaussian proposal. ``log_lik_fn`` maps an
    (s, d) block of latent rows to an (s,) vector of conditional log
    likelihoods. Consistent for any proposal with full support."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    log_weights = []
    remaining = n_samples
    while remaining > 0:
        s = min(chunk, remaining)
        z = sample_gaussian(proposal, rng, size=s)
        lw = log_lik_fn(z) + standard_normal_log_pdf(z) - diag_gaussian_log_pdf(z, proposal)
        log_weights.append(np.asarray(lw, dtype=np.float64))
        remaining -= s
    all_lw = np.concatenate(log_weights)
    return float(log_sum_exp(all_lw) - np.log(n_samples))


def _model_conditional_loglik(params: ModelParams, x_row: np.ndarray, cov_row):
    def fn(z):
        cov = None if cov_row is None else np.tile(cov_row, (z.shape[0], 1))
        p = decode(z, cov, params, mode="eval")
        return zinb_log_pmf(x_row[None, :], ZinbParams(p.mu, p.theta, p.pi)).sum(axis=1)

    return fn


def heldout_marginal_ll(
    params: ModelParams,
    heldout: ExpressionMatrix,
    covariates,
    n_importance_samples: int,
    rng: np.random.Generator,
) -> float:
    """Mean per-cell log marginal likelihood of held-out cells, estimated by
    importance sampling from the encoder posterior (eval-mode networks)."""
    if n_importance_samples < 1:
        raise ValueError("n_importance_samples must be >= 1")
    counts = heldout.counts if hasattr(heldout, "counts") else np.asarray(heldout, dtype=float)
    total = 0.0
    for i in range(counts.shape[0]):
        cov_row = covariates[i] if covariates is not None else None
        q = encode(counts[i], cov_row, params, mode="eval")
        total += importance_log_marginal(
            q, _model_conditional_loglik(params, counts[i], cov_row), n_importance_samples, rng
        )
    return total / counts.shape[0]


# ---------------------------------------------------------------------------
# corruption / imputation
# ---------------------------------------------------------------------------


@dataclass
class CorruptionConfig:
    """Entries are zeroed with probability exp(-decay * ln(1+x)^2), an
    expression-dependent dropout profile that spares large counts."""

    decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("decay must be > 0")


@dataclass
class CorruptionMask:
    """Positions zeroed by ``corrupt`` together with the values they held."""

    rows: np.ndarray
    cols: np.ndarray
    true_values: np.ndarray

    def __len__(self):
        return len(self.rows)


def corruption_probability(counts: np.ndarray, decay: float) -> np.ndarray:
    u = np.log1p(counts)
    return np.exp(-decay * u * u)


def calibrate_decay(matrix: ExpressionMatrix, target_fraction: float = 0.1) -> float:
    """Bisect for the decay giving an expected ``target_fraction`` of nonzero
    entries zeroed on this matrix."""
    nonzero = matrix.counts[matrix.counts > 0]
    if nonzero.size == 0:
        raise ValueError("matrix has no nonzero entries to corrupt")

    def expected(decay):
        return float(corruption_probability(nonzero, decay).mean())

    lo, hi = 1e-6, 1e6
    if expected(lo) < target_fraction:
        return lo
    if expected(hi) > target_fraction:
        return hi
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if expected(mid) > target_fraction:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


def corrupt(matrix: ExpressionMatrix, cfg: CorruptionConfig):
    """Zero nonzero entries at random, more aggressively for small counts.
    Returns (corrupted matrix, mask with true values). Already-zero entries
    never enter the mask."""
    rng = np.random.default_rng(cfg.seed)
    counts = matrix.counts
    p = corruption_probability(counts, cfg.decay)
    mask = (counts > 0) & (rng.random(counts.shape) < p)
    rows, cols = np.nonzero(mask)
    corrupted = ExpressionMatrix(
        counts=np.where(mask, 0.0, counts),
        gene_names=list(matrix.gene_names),
        cell_ids=list(matrix.cell_ids),
        labels=list(matrix.labels) if matrix.labels is not None else None,
        batch_ids=list(matrix.batch_ids) if matrix.batch_ids is not None else None,
        qc=matrix.qc.copy() if matrix.qc is not None else None,
        qc_names=list(matrix.qc_names) if matrix.qc_names is not None else None,
    )
    return corrupted, CorruptionMask(rows=rows, cols=cols, true_values=counts[rows, cols])


def posterior_mean_decode(params: ModelParams, matrix, covariates, chunk: int = 512):
    """Eval-mode (mu, pi) matrices decoded at each cell's posterior mean."""
    counts = matrix.counts if hasattr(matrix, "counts") else np.asarray(matrix, dtype=float)
    mus, pis = [], []
    for start in range(0, counts.shape[0], chunk):
        block = slice(start, start + chunk)
        cov = covariates[block] if covariates is not None else None
        q = encode(counts[block], cov, params, mode="eval")
        p = decode(q.mean, cov, params, mode="eval")
        mus.append(np.atleast_2d(p.mu))
        pis.append(np.atleast_2d(p.pi))
    return np.concatenate(mus), np.concatenate(pis)


@dataclass
class ImputationResult:
    imputed: np.ndarray
    pi: np.ndarray
    median_abs_error: float
    mean_abs_error: float
    dropout_bce: float


def impute(params: ModelParams, corrupted: ExpressionMatrix, covariates, mask: CorruptionMask) -> ImputationResult:
    """Impute masked entries with the decoded NB mean at the posterior-mean
    latent, and score dropout identification with the decoded zero-inflation
    probability.

    The absolute error is over the masked entries only; the binary cross
    entropy treats every zero entry of the corrupted matrix as an example,
    with "was masked" as the positive class.
    """
    mu, pi = posterior_mean_decode(params, corrupted, covariates)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(pi))):
        raise NumericalError("imputation: model produced non-finite outputs")
    imputed = mu[mask.rows, mask.cols]
    errors = np.abs(imputed - mask.true_values)
    zero_positions = corrupted.counts == 0
    is_masked = np.zeros_like(zero_positions, dtype=bool)
    is_masked[mask.rows, mask.cols] = True
    bce = binary_cross_entropy(pi[zero_positions], is_masked[zero_positions])
    return ImputationResult(
        imputed=imputed,
        pi=pi[mask.rows, mask.cols],
        median_abs_error=float(np.median(errors)) if errors.size else 0.0,
        mean_abs_error=float(errors.mean()) if errors.size else 0.0,
        dropout_bce=bce,
    )


def binary_cross_entropy(prob: np.ndarray, positive: np.ndarray) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(positive, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


# ---------------------------------------------------------------------------
# clustering / covariate metrics
# ---------------------------------------------------------------------------


def silhouette(latent: np.ndarray, labels) -> float:
    """Mean silhouette with Euclidean distance. Conventions: cells in
    singleton clusters score 0; when a(i) = b(i) = 0 the score is 0."""
    x = np.asarray(latent, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("latent must be (cells, dims) matching labels")
    categories, inverse = np.unique(labels, return_inverse=True)
    if len(categories) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    n = x.shape[0]
    k = len(categories)
    sizes = np.bincount(inverse, minlength=k)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), inverse] = 1.0
    scores = np.zeros(n)
    sq = (x * x).sum(axis=1)
    chunk = 2048
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (x[rows] @ x.T)
        dist = np.sqrt(np.maximum(d2, 0.0))
        sums = dist @ onehot  # (rows, k): summed distance to each cluster
        for local, i in enumerate(range(start, min(start + chunk, n))):
            c = inverse[i]
            if sizes[c] < 2:
                continue  # singleton: score stays 0
            a = sums[local, c] / (sizes[c] - 1)
            other = [sums[local, j] / sizes[j] for j in range(k) if j != c and sizes[j] > 0]
            b = min(other)
            denom = max(a, b)
            scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def qc_correlation(latent: np.ndarray, qc: np.ndarray) -> float:
    """Mean absolute Pearson correlation over (latent dim, QC column) pairs;
    lower means the latent space carries less of the tracked covariates.
    Zero-variance columns on either side contribute 0."""
    x = np.asarray(latent, dtype=np.float64)
    q = np.asarray(qc, dtype=np.float64)
    if q.ndim == 1:
        q = q[:, None]
    if x.shape[0] != q.shape[0]:
        raise ValueError("latent and qc must have the same number of cells")
    if q.shape[1] < 1:
        raise ValueError("qc needs at least one column")
    xc = x - x.mean(axis=0)
    qcn = q - q.mean(axis=0)
    xs = np.sqrt((xc * xc).sum(axis=0))
    qs = np.sqrt((qcn * qcn).sum(axis=0))
    corr = np.zeros((x.shape[1], q.shape[1]))
    valid = np.outer(xs > 0, qs > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = (xc.T @ qcn) / np.outer(np.where(xs > 0, xs, 1.0), np.where(qs > 0, qs, 1.0))
    corr[valid] = raw[valid]
    return float(np.abs(corr).mean())


# ---------------------------------------------------------------------------
# factor-analysis baseline
# ---------------------------------------------------------------------------


@dataclass
class FactorAnalysisModel:
    """Linear-Gaussian factor model x ~ N(mean + loadings z, diag(psi)),
    z ~ N(0, I), fit by EM on (log-transformed) data."""

    mean: np.ndarray
    loadings: np.ndarray  # (genes, latent_dim)
    psi: np.ndarray  # (genes,)
    loglik_trace: list
    converged: bool

    @property
    def latent_dim(self) -> int:
        return self.loadings.shape[1]

    def marginal_log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """Exact per-row log density under N(mean, loadings loadings^T + diag psi)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cov = self.loadings @ self.loadings.T + np.diag(self.psi)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise NumericalError("factor-analysis covariance is not positive definite")
        xc = x - self.mean
        solved = np.linalg.solve(cov, xc.T).T
        quad = (xc * solved).sum(axis=1)
        g = x.shape[1]
        return -0.5 * (g * np.log(2.0 * np.pi) + logdet + quad)

    def posterior(self, x: np.ndarray):
        """Posterior over z given x: (means (n, d), shared covariance (d, d))."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.latent_dim
        b = self.loadings / self.psi[:, None]  # psi^-1 loadings
        m = np.eye(d) + self.loadings.T @ b
        cov_z = np.linalg.inv(m)
        means = (x - self.mean) @ b @ cov_z
        return means, cov_z

    def latents(self, x: np.ndarray) -> np.ndarray:
        return self.posterior(x)[0]

    def conditional_log_lik_fn(self, x_row: np.ndarray):
        """log N(x_row; mean + z loadings^T, diag psi) as a function of an
        (s, d) block of latent rows, for importance-sampler use."""

        def fn(z):
            pred = self.mean + z @ self.loadings.T
            resid = x_row - pred
            return -0.5 * (
                (resid * resid / self.psi).sum(axis=1)
                + np.log(2.0 * np.pi * self.psi).sum()
            )

        return fn


def factor_analysis_fit(
    data: np.ndarray,
    latent_dim: int,
    n_iter: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
    psi_floor: float = 1e-6,
) -> FactorAnalysisModel:
    """Maximum-likelihood factor analysis via EM.

    ``data`` is the already-transformed (cells, genes) matrix. latent_dim = 0
    degenerates to an independent diagonal Gaussian. Emits a warning and
    returns the last iterate if EM does not converge within ``n_iter``.
    """
    x = np.asarray(data, dtype=np.float64)
    n, g = x.shape
    if latent_dim >= g:
        raise ValueError("latent_dim must be < number of genes")
    mean = x.mean(axis=0)
    xc = x - mean
    var = xc.var(axis=0)
    psi = np.maximum(var, psi_floor)
    if latent_dim == 0:
        model = FactorAnalysisModel(
            mean=mean,
            loadings=np.zeros((g, 0)),
            psi=psi,
            loglik_trace=[],
            converged=True,
        )
        model.loglik_trace = [float(model.marginal_log_likelihood(x).sum())]
        return model
    rng = np.random.default_rng(seed)
    loadings = rng.normal(scale=0.01, size=(g, latent_dim))
    trace: list[float] = []
    converged = False
    eye = np.eye(latent_dim)
    for _ in range(n_iter):
        b = loadings / psi[:, None]
        m = eye + loadings.T @ b
        cov_z = np.linalg.inv(m)
        ez = xc @ b @ cov_z  # (n, d)
        sum_ezz = n * cov_z + ez.T @ ez
        cross = xc.T @ ez  # (g, d)
        loadings = np.linalg.solve(sum_ezz.T, cross.T).T
        psi = np.maximum(var - (loadings * cross).sum(axis=1) / n, psi_floor)
        model = FactorAnalysisModel(mean, loadings, psi, trace, False)
        trace.append(float(model.marginal_log_likelihood(x).sum()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * (1.0 + abs(trace[-2])):
            converged = True
            break
    if not converged:
        warnings.warn("factor analysis EM did not converge; returning last iterate")
    return FactorAnalysisModel(mean, loadings, psi, trace, converged)


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    metric: str
    value: float
    dataset: str
    config_hash: str
    seed: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalError(f"benchmark metric {self.metric!r} is not finite")


def write_reports_csv(reports: list[BenchmarkReport], path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value,dataset,config_hash,seed\n")
        for r in reports:
            fh.write(f"{r.metric},{r.value!r},{r.dataset},{r.config_hash},{r.seed}\n")


def write_reports_json(reports: list[BenchmarkReport], path):
    payload = {
        "reports": [
            {
                "metric": r.metric,
                "value": r.value,
                "dataset": r.dataset,
                "config_hash": r.config_hash,
                "seed": r.seed,
            }
            for r in reports
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
