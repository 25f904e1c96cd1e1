"""Small dataset builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from maria.data import CATEGORICAL, FeatureSchema, Modality, MultimodalDataset

# (criterion number, title, passed, detail) rows collected by test_acceptance
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def make_dataset(observed, labels=None, seed=0, categorical=()):
    """Dataset with random values and the given per-modality observed grids.

    ``categorical`` lists (modality, column) pairs to declare as 3-category
    features; their values are drawn from {0, 1, 2}.
    """
    rng = np.random.default_rng(seed)
    observed = [np.asarray(o, dtype=bool) for o in observed]
    n = observed[0].shape[0]
    mods = []
    for i, o in enumerate(observed):
        schema, cols = [], []
        for j in range(o.shape[1]):
            if (i, j) in categorical:
                schema.append(FeatureSchema(f"f{j}", CATEGORICAL, ("a", "b", "c")))
                cols.append(rng.integers(0, 3, n).astype(float))
            else:
                schema.append(FeatureSchema(f"f{j}"))
                cols.append(rng.normal(size=n))
        mods.append(Modality(f"m{i}", tuple(schema), np.column_stack(cols), o))
    labels = np.arange(n) % 2 if labels is None else np.asarray(labels)
    return MultimodalDataset(tuple(mods), labels, tuple(f"c{k}" for k in range(int(labels.max()) + 1)))


def random_observed(rng, n, widths, p_missing):
    """Per-modality observed grids where every sample keeps >= 1 observed cell."""
    obs = [rng.random((n, w)) >= p_missing for w in widths]
    for s in range(n):
        if not any(o[s].any() for o in obs):
            i = rng.integers(len(widths))
            obs[i][s, rng.integers(widths[i])] = True
    return obs
