"""Polya-Gamma PG(b, c) utilities."""
from __future__ import annotations

import numpy as np

_SMALL_C = 1e-8


def pg_mean(b, c):
    """E[omega] for omega ~ PG(b, c), i.e. b / (2c) * tanh(c / 2).

    Vectorised over ``c``; the limit b/4 is used for ``|c| < 1e-8``.
    """
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("PG shape b must be positive")
    c = np.abs(np.asarray(c, dtype=float))
    small = c < _SMALL_C
    safe = np.where(small, 1.0, c)
    out = np.where(small, b / 4.0, b / (2.0 * safe) * np.tanh(safe / 2.0))
    return out[()] if out.ndim == 0 else out


def series_denominators(c, n_terms: int) -> np.ndarray:
    """2 pi^2 ((k - 1/2)^2 + c^2 / (4 pi^2)) for k = 1..n_terms, broadcast over c."""
    k = np.arange(1, n_terms + 1) - 0.5
    c = np.asarray(c, dtype=float)[..., None]
    return 2.0 * np.pi ** 2 * (k ** 2 + c ** 2 / (4.0 * np.pi ** 2))


def pg_sample(b, c, rng: np.random.Generator, size=None, n_terms: int = 200):
    """Draw from PG(b, c) with the truncated gamma-series representation.

    The first ``n_terms`` gamma terms are sampled; the remainder of the series
    is replaced by its expectation so that the draw is unbiased in mean.
    ``c`` may be an array, in which case one draw per entry is returned.
    """
    if np.any(np.asarray(b) <= 0):
        raise ValueError("PG shape b must be positive")
    c = np.asarray(c, dtype=float)
    if size is not None:
        c = np.broadcast_to(c, size)
    denom = series_denominators(c, n_terms)
    g = rng.gamma(b, 1.0, size=denom.shape)
    head = (g / denom).sum(axis=-1)
    tail = pg_mean(b, c) - (b / denom).sum(axis=-1)
    out = head + np.maximum(tail, 0.0)
    return out[()] if out.ndim == 0 else out
