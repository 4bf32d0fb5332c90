import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_attention_probs(rng, rows, cols, dtype=np.float64, floor=0.0):
    """Row-stochastic matrix sampled from the simplex per row.

    ``floor`` mixes in a uniform component, keeping entries away from the
    probability clamp so finite-difference probes stay on a smooth region.
    """
    probs = rng.dirichlet(np.ones(cols), size=rows)
    if floor:
        probs = (1.0 - floor) * probs + floor / cols
    return probs.astype(dtype)


def as_map(probs, kind, spatial):
    from textsmith.attention import AttentionMap
    t = torch.from_numpy(np.asarray(probs, dtype=np.float64))
    return AttentionMap(probs=t, kind=kind, spatial=spatial)
