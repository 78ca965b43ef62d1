"""Shared numerics: stable log-sums, counter-based hashing, seed derivation."""

from __future__ import annotations

import math

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class BudgetError(RuntimeError):
    """Raised when an exact computation would exceed its configured budget."""


def mix64(x):
    """SplitMix64 finalizer. Accepts uint64 scalars or arrays, returns same."""
    with np.errstate(over="ignore"):
        x = (x + _GOLDEN) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * _MIX1) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * _MIX2) & _MASK64
        return x ^ (x >> np.uint64(31))


def derive_seed(seed: int, *indices: int) -> int:
    """Deterministically derive a child seed from a root seed and an index path.

    Used to give every replica / chunk / subsystem its own independent stream
    while keeping results a pure function of the root seed.
    """
    h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for ix in indices:
        h = mix64(h ^ np.uint64(ix & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def site_uniforms(seed: int, sites: np.ndarray, stream: int = 0) -> np.ndarray:
    """Uniform(0,1) value per lattice site, a pure function of (seed, site).

    ``sites`` is an integer array of shape (n, d); negative coordinates are
    folded through two's complement so the hash is defined on all of Z^d.
    """
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[None, :]
    h = np.full(sites.shape[0], np.uint64(derive_seed(seed, stream)), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for axis in range(sites.shape[1]):
            h = mix64(h ^ sites[:, axis].astype(np.uint64))
    # top 53 bits -> double in [0, 1)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis if axis is not None else None)
    return float(out) if np.ndim(out) == 0 else out


def logmeanexp(a, axis=None):
    a = np.asarray(a, dtype=np.float64)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - math.log(n)


def jackknife_stderr_logmean(logw: np.ndarray) -> float:
    """Jackknife standard error of log-mean-exp over one replica axis."""
    logw = np.asarray(logw, dtype=np.float64)
    n = logw.size
    if n < 2:
        return float("nan")
    total = logsumexp(logw)
    # leave-one-out log sums, log(e^total - e^wi) done stably
    delta = logw - total
    with np.errstate(divide="ignore"):
        loo = total + np.log1p(-np.exp(delta))
    loo -= math.log(n - 1)
    center = loo.mean()
    var = (n - 1) / n * np.sum((loo - center) ** 2)
    return float(math.sqrt(var))


def effective_sample_size(logw: np.ndarray) -> float:
    """(sum w)^2 / sum w^2 for weights given in log space."""
    logw = np.asarray(logw, dtype=np.float64)
    return float(math.exp(2.0 * logsumexp(logw) - logsumexp(2.0 * logw)))


def fsum(values) -> float:
    """Compensated summation; wraps math.fsum for iterables and arrays."""
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist())
