"""Seeded ring-graph datasets for desk-scale experiments.

Nodes on a ring are grouped into contiguous communities. Each community
owns a seasonal signal whose per-cycle shape drifts as an AR(1) process
around a fixed base profile; each node observes its community signal
shifted by a small node-specific phase, plus i.i.d. Gaussian noise. The
previous cycle of a related node is therefore informative about the
current cycle of the target, while the community shape cannot simply be
memorized.
"""
from __future__ import annotations

import numpy as np

from .data import TimeSeriesDB
from .errors import DataError
from .graph import RelationGraph

HARMONICS = 3


def _cycle_shapes(rng: np.random.Generator, n_cycles: int, period: int, drift: float) -> np.ndarray:
    """``[n_cycles, period]`` seasonal shapes for one community."""
    phase = np.arange(period) / period
    h = np.arange(1, HARMONICS + 1)
    basis = np.concatenate([np.sin(2 * np.pi * np.outer(h, phase)), np.cos(2 * np.pi * np.outer(h, phase))])
    scale = np.concatenate([1.0 / h, 1.0 / h])
    base = rng.normal(size=2 * HARMONICS) * scale
    coef = np.empty((n_cycles, 2 * HARMONICS))
    dev = rng.normal(size=2 * HARMONICS) * scale
    for c in range(n_cycles):
        dev = drift * dev + np.sqrt(1.0 - drift ** 2) * rng.normal(size=2 * HARMONICS) * scale
        coef[c] = base + dev
    return coef @ basis


def synth_data_gen(n: int, t_prime: int, period: int, noise: float = 0.1, seed: int = 0,
                   community_size: int = 8, max_phase: int | None = None,
                   drift: float = 0.8) -> TimeSeriesDB:
    """Ring-graph dataset of ``n`` univariate series with ``t_prime`` hourly steps."""
    if n < 3:
        raise DataError("need at least 3 series for a ring graph")
    if period < 2 or period > t_prime:
        raise DataError(f"period must lie in [2, t_prime={t_prime}], got {period}")
    if noise < 0:
        raise DataError("noise std must be non-negative")
    if community_size < 1:
        raise DataError("community size must be >= 1")
    if not 0 <= drift < 1:
        raise DataError("drift must lie in [0, 1)")
    max_phase = max(1, period // 8) if max_phase is None else max_phase
    rng = np.random.default_rng(seed)

    n_comm = -(-n // community_size)
    community = np.arange(n) // community_size
    offsets = rng.integers(0, max_phase + 1, size=n)
    span = t_prime + max_phase
    n_cycles = -(-span // period)
    signals = []
    for _ in range(n_comm):
        shapes = _cycle_shapes(rng, n_cycles, period, drift)
        signals.append(shapes.reshape(-1)[:span])
    noise_draw = rng.normal(size=(n, t_prime)) * noise

    values = np.empty((n, t_prime, 1))
    for i in range(n):
        o = offsets[i]
        values[i, :, 0] = signals[community[i]][o:o + t_prime] + noise_draw[i]
    ids = tuple(f"s{i}" for i in range(n))
    return TimeSeriesDB(values, ids, RelationGraph.ring(n), start_time=0, step_unit="hour", period=period)
