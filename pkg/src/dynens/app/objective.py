"""Synthetic objective used where a real simulation would sit.

A sum of three anisotropic Gaussian bumps over the unit box plus a mild
linear trend: smooth everywhere, with localized features a surrogate has
to work to find. Placement is drawn from a seed so tests can vary the
landscape without losing reproducibility.
"""

from __future__ import annotations

import numpy as np

N_BUMPS = 3


def make_objective(n_dims: int = 2, seed: int = 0):
    """Build f: (m, n) or (n,) array -> (m,) array or float."""
    if n_dims < 1:
        raise ValueError(f"n_dims must be >= 1, got {n_dims}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.15, 0.85, (N_BUMPS, n_dims))
    widths = rng.uniform(0.08, 0.25, (N_BUMPS, n_dims))
    amplitudes = rng.uniform(0.6, 1.5, N_BUMPS)
    trend = rng.uniform(-0.5, 0.5, n_dims)

    def objective(x):
        arr = np.asarray(x, dtype=float)
        scalar = arr.ndim == 1
        pts = np.atleast_2d(arr)
        if pts.shape[1] != n_dims:
            raise ValueError(
                f"expected points with {n_dims} dims, got shape {arr.shape}")
        # (m, k, n) scaled distances to each bump center
        z = (pts[:, None, :] - centers[None, :, :]) / widths[None, :, :]
        bumps = amplitudes * np.exp(-0.5 * np.sum(z**2, axis=2))
        vals = bumps.sum(axis=1) + pts @ trend
        return float(vals[0]) if scalar else vals

    return objective
