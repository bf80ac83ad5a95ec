"""Scalar special functions on float64 arrays: log-gamma, digamma, stable
sigmoid/softplus/log-sum-exp. Everything is vectorized over numpy arrays and
accepts scalars.
"""

from __future__ import annotations

import numpy as np

# Lanczos approximation, g = 7, 9 coefficients (~15 significant digits on
# the positive real axis).
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lanczos_log_gamma(x: np.ndarray) -> np.ndarray:
    # valid for x >= 0.5
    z = x - 1.0
    a = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, 9):
        a += _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def log_gamma(x):
    """ln Gamma(x) for x > 0. Raises ValueError outside the domain."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("log_gamma requires finite x > 0")
    out = np.empty_like(arr)
    small = arr < 0.5
    if np.any(small):
        xs = arr[small]
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos_log_gamma(1.0 - xs)
    big = ~small
    if np.any(big):
        out[big] = _lanczos_log_gamma(arr[big])
    return out if out.ndim else float(out)


def digamma(x):
    """d/dx ln Gamma(x) for x > 0, via recurrence + asymptotic series."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("digamma requires finite x > 0")
    xv = np.array(arr, dtype=np.float64, copy=True)
    if xv.ndim == 0:
        xv = xv.reshape(1)
    acc = np.zeros_like(xv)
    # shift argument up to >= 10 where the asymptotic series converges fast
    mask = xv < 10.0
    while np.any(mask):
        acc[mask] -= 1.0 / xv[mask]
        xv[mask] += 1.0
        mask = xv < 10.0
    u = 1.0 / (xv * xv)
    series = u * (
        1.0 / 12.0
        - u
        * (
            1.0 / 120.0
            - u
            * (1.0 / 252.0 - u * (1.0 / 240.0 - u * (1.0 / 132.0 - u * 691.0 / 32760.0)))
        )
    )
    out = np.log(xv) - 0.5 / xv - series + acc
    out = out.reshape(np.shape(arr))
    return out if out.ndim else float(out)


def sigmoid(x):
    """1/(1+exp(-x)), stable for large |x|."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """ln(1+exp(x)), stable for large |x|."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.logaddexp(0.0, arr)
    return out if out.ndim else float(out)


def log_sum_exp(a, axis=None):
    """log(sum(exp(a))) along an axis, tolerating -inf entries."""
    arr = np.asarray(a, dtype=np.float64)
    m = np.max(arr, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)
