"""Log-space helpers for normalized distributions and messages."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

# Linear-space probability floor for messages; log(1e-300) ~ -690.8.
PROB_FLOOR = 1e-300
LOG_FLOOR = math.log(PROB_FLOOR)

# Largest joint state space enumerated or materialized as a dense table.
DEFAULT_CAP = 2**22


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; -inf for all -inf input.

    A lean version of scipy.special.logsumexp: the scipy one spends most of
    its time in array-API dispatch, which dominates on message-sized inputs.
    """
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_normalize(logp: np.ndarray) -> np.ndarray:
    """Shift so that logsumexp == 0.  Raises ZeroDivisionError on empty support."""
    z = logsumexp(logp)
    if not np.isfinite(z):
        raise ZeroDivisionError("distribution has no support")
    return logp - z


def floor_normalize(logp: np.ndarray) -> np.ndarray:
    """Normalize, clamp at the probability floor, and renormalize."""
    out = np.maximum(log_normalize(logp), LOG_FLOOR)
    return out - logsumexp(out)


def damp(old: np.ndarray, proposed: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return proposed
    mixed = gamma * old + (1.0 - gamma) * proposed
    return mixed - logsumexp(mixed)


def marginal_log(logb: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Log-marginal of a normalized log table onto ``axes`` (kept in order)."""
    keep = tuple(axes)
    drop = tuple(i for i in range(logb.ndim) if i not in keep)
    out = logsumexp(logb, axis=drop) if drop else logb
    if list(keep) != sorted(keep):
        out = np.transpose(out, np.argsort(np.argsort(keep)))
    return out


def entropy_term(p: np.ndarray) -> float:
    """sum p log p with 0 log 0 := 0."""
    p = np.asarray(p, dtype=float)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask])))


def expected_energy(p: np.ndarray, energies: np.ndarray) -> float:
    """sum p E with 0 * inf := 0 and +inf if p > 0 meets E = inf."""
    p = np.asarray(p, dtype=float)
    e = np.broadcast_to(np.asarray(energies, dtype=float), p.shape)
    mask = p > 0
    return float(np.sum(p[mask] * e[mask]))


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0
