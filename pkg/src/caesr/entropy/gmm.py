"""Discretized Gaussian-mixture probabilities, rate estimates and coder tables.

Symbols live in [-128, 127].  Coder tables carry 258 buckets: index 0 is the
lower tail (mass below -128.5), indices 1..256 are the symbols and 257 is the
upper tail.  Parameters are snapped to fixed grids before a table is built so
that encoder and decoder always derive identical integer CDFs.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

SYMBOL_MIN = -128
SYMBOL_MAX = 127
N_BUCKETS = SYMBOL_MAX - SYMBOL_MIN + 1 + 2
CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
SCALE_MIN = 1e-6

MEAN_STEP = 1.0 / 16
SIGMA_GRID = 0.05 * (32.0 / 0.05) ** (np.arange(64) / 63.0)
_LOG_SIGMA_RATIO = math.log(SIGMA_GRID[1] / SIGMA_GRID[0])
WEIGHT_UNITS = 64


def symbol_to_bucket(symbols):
    return np.asarray(symbols, dtype=np.int64) - SYMBOL_MIN + 1


def bucket_to_symbol(buckets):
    return np.asarray(buckets, dtype=np.int64) + SYMBOL_MIN - 1


def _interval(lo, hi):
    """Phi(hi) - Phi(lo), evaluated on the lower tail side for accuracy."""
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    return ndtr(b) - ndtr(a)


def _phi(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def gmm_pmf(weights, means, scales, s: int) -> float:
    """Probability of integer symbol ``s`` under one element's mixture.

    ``s < -128`` returns the lower-tail mass and ``s > 127`` the upper-tail mass.
    """
    total = 0.0
    for w, mu, sigma in zip(weights, means, scales):
        if s < SYMBOL_MIN:
            p = _phi((SYMBOL_MIN - 0.5 - mu) / sigma)
        elif s > SYMBOL_MAX:
            p = _phi(-(SYMBOL_MAX + 0.5 - mu) / sigma)
        else:
            hi = (s + 0.5 - mu) / sigma
            lo = (s - 0.5 - mu) / sigma
            p = _phi(-lo) - _phi(-hi) if lo > 0 else _phi(hi) - _phi(lo)
        total += w * p
    return total


def gmm_likelihood(values, weights, means, scales) -> np.ndarray:
    """Interval likelihood of ``values`` (integer or real), vectorised.

    ``weights``, ``means`` and ``scales`` have a leading mixture axis K and
    otherwise broadcast against ``values``.
    """
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sigma = np.asarray(scales, dtype=np.float64)
    p = _interval((v - 0.5 - mu) / sigma, (v + 0.5 - mu) / sigma)
    return np.sum(w * p, axis=0)


def estimate_rate(values, weights, means, scales, min_prob: float = 0.0) -> float:
    """Total bits: sum of -log2 p(value) under the per-element mixtures.

    ``min_prob`` clamps each likelihood from below, as the network's rate term does.
    """
    p = np.maximum(gmm_likelihood(values, weights, means, scales), min_prob)
    if not np.all(p > 0):
        raise FloatingPointError("zero probability in rate estimate")
    return float(-np.sum(np.log2(p)))


# --- snapping ---------------------------------------------------------------

def snap_means(means):
    m = np.clip(np.asarray(means, dtype=np.float64), SYMBOL_MIN, SYMBOL_MAX)
    return np.round(m / MEAN_STEP) * MEAN_STEP


def snap_scales(scales):
    s = np.maximum(np.asarray(scales, dtype=np.float64), SCALE_MIN)
    idx = np.clip(np.rint(np.log(s / SIGMA_GRID[0]) / _LOG_SIGMA_RATIO), 0, len(SIGMA_GRID) - 1)
    return SIGMA_GRID[idx.astype(np.int64)]


def _largest_remainder(p, total: int, axis: int):
    """Integer allocation of ``total`` proportional to ``p`` along ``axis``."""
    p = np.moveaxis(np.asarray(p, dtype=np.float64), axis, -1)
    p = p / p.sum(axis=-1, keepdims=True)
    scaled = p * total
    base = np.floor(scaled).astype(np.int64)
    rem = scaled - base
    deficit = np.clip(total - base.sum(axis=-1, keepdims=True), 0, None)
    order = np.argsort(-rem, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(p.shape[-1]), order.shape), axis=-1)
    return np.moveaxis(base + (ranks < deficit), -1, axis)


def snap_weights(weights):
    """Weights as multiples of 1/64 summing to exactly one (mixture axis 0)."""
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    return _largest_remainder(w, WEIGHT_UNITS, axis=0) / WEIGHT_UNITS


def snap_params(weights, means, scales):
    return snap_weights(weights), snap_means(means), snap_scales(scales)


# --- coder tables -----------------------------------------------------------

_EDGES = np.arange(SYMBOL_MIN, SYMBOL_MAX + 2) - 0.5


def bucket_probabilities(weights, means, scales) -> np.ndarray:
    """[M, 258] bucket masses for M elements; parameters are [K, M]."""
    w = np.asarray(weights, dtype=np.float64)[..., None]
    mu = np.asarray(means, dtype=np.float64)[..., None]
    sigma = np.asarray(scales, dtype=np.float64)[..., None]
    z = (_EDGES - mu) / sigma
    lo = np.concatenate([np.full(z.shape[:-1] + (1,), -np.inf), z], axis=-1)
    hi = np.concatenate([z, np.full(z.shape[:-1] + (1,), np.inf)], axis=-1)
    return np.sum(w * _interval(lo, hi), axis=0)


def quantize_pmf(p) -> np.ndarray:
    """Counts summing to 2**16 with a floor of one per bucket."""
    spare = CDF_TOTAL - p.shape[-1]
    return 1 + _largest_remainder(p, spare, axis=-1)


def build_cdf(weights, means, scales) -> np.ndarray:
    """Snapped-parameter cumulative tables, shape [M, 259], int32.

    Inputs are [K, M] arrays (or [K] for a single element).
    """
    w = np.asarray(weights, dtype=np.float64)
    single = w.ndim == 1
    if single:
        w, means, scales = w[:, None], np.asarray(means)[:, None], np.asarray(scales)[:, None]
    w, mu, sigma = snap_params(w, means, scales)
    counts = quantize_pmf(bucket_probabilities(w, mu, sigma))
    cdf = np.zeros(counts.shape[:-1] + (counts.shape[-1] + 1,), dtype=np.int32)
    np.cumsum(counts, axis=-1, out=cdf[..., 1:])
    return cdf[0] if single else cdf
