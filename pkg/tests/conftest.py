import numpy as np
import pytest

from relcast.data import TimeSeriesDB
from relcast.graph import RelationGraph
from relcast.synthetic import synth_data_gen


@pytest.fixture
def toy_db():
    """Five bivariate series on a path graph, 48 steps, period 12."""
    rng = np.random.default_rng(7)
    t = np.arange(48)
    base = np.sin(2 * np.pi * t / 12)
    values = np.stack([
        np.stack([base + 0.1 * i + 0.05 * rng.normal(size=48), np.cos(2 * np.pi * t / 12) * (i + 1)], axis=-1)
        for i in range(5)
    ])
    graph = RelationGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    return TimeSeriesDB(values, ("a1", "a2", "a3", "a4", "a10"), graph, start_time=100,
                        step_unit="hour", period=12)


@pytest.fixture
def ring_db():
    return synth_data_gen(n=20, t_prime=96, period=24, noise=0.1, seed=3)
