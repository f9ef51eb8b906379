"""Stripe partitioning, spatial pooling, and feature normalization."""
from __future__ import annotations

import numpy as np

from .errors import IndivisibleHeight

GAP = "gap"
GMP = "gmp"
POOLING_MODES = (GAP, GMP)

NORM_EPS = 1e-12


def partition(fmap: np.ndarray, k: int) -> list[np.ndarray]:
    """Split a (h, w, c) map into k equal horizontal stripes, top to bottom."""
    h = fmap.shape[0]
    if k < 1 or h % k != 0:
        raise IndivisibleHeight(f"k={k} does not divide height {h}")
    return np.split(fmap, k, axis=0)


def pool(stripe: np.ndarray, mode: str = GAP) -> np.ndarray:
    """Collapse spatial positions to one channel vector (mean or max)."""
    if mode == GAP:
        return stripe.mean(axis=(0, 1))
    if mode == GMP:
        return stripe.max(axis=(0, 1))
    raise ValueError(f"unknown pooling mode {mode!r}")


def normalize(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale to unit Euclidean norm; (near-)zero input maps to the zero vector."""
    norm = float(np.linalg.norm(x))
    if norm < eps:
        return np.zeros_like(x)
    return x / norm


def compact_features(fmap: np.ndarray, k: int, mode: str = GAP) -> tuple[np.ndarray, np.ndarray]:
    """Pooled and normalized global vector plus the k part vectors.

    Returns ``(x0, parts)`` with ``x0`` of shape (c,) and ``parts`` of shape
    (k, c); index 0 of the conceptual part list is the global vector.
    """
    x0 = normalize(pool(fmap, mode))
    parts = np.stack([normalize(pool(s, mode)) for s in partition(fmap, k)])
    return x0, parts
