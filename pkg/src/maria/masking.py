"""Attention masks, MCAR missingness injection and dropout regularizers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import MultimodalDataset

MISSING_MODALITIES = "missing_modalities"
ALL_MISSING = "all_missing"
SCENARIOS = (MISSING_MODALITIES, ALL_MISSING)
OMEGA = "omega"
RATE_MENU = (OMEGA, 0.05, 0.10, 0.30, 0.50, 0.75)

# guards the ceiling against float noise such as 0.3 * 40 = 12.000000000000002
_CEIL_TOL = 1e-9


class InfeasibleInjection(RuntimeError):
    pass


# ---------------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskMatrix:
    """Additive {0, -inf} mask whose column j is -inf iff token j is unobserved."""

    additive: np.ndarray
    observed: np.ndarray

    @property
    def T(self) -> np.ndarray:
        return np.swapaxes(self.additive, -1, -2)


def build_mask(obs) -> MaskMatrix:
    """Mask for an observed vector ``[..., t]``; returns ``[..., t, t]``."""
    obs = np.asarray(obs, dtype=bool)
    t = obs.shape[-1]
    col = np.where(obs, 0.0, -np.inf)[..., None, :]
    return MaskMatrix(np.broadcast_to(col, obs.shape[:-1] + (t, t)).copy(), obs)


# ---------------------------------------------------------------------- MCAR


@dataclass(frozen=True)
class MissingnessPlan:
    scenario: str
    rate: float | str = OMEGA
    seed: int = 0
    scope: str = "train"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.rate != OMEGA and not (0.0 <= float(self.rate) < 1.0):
            raise ValueError(f"missing rate must lie in [0, 1), got {self.rate}")
        if self.scope not in ("train", "test"):
            raise ValueError(f"scope must be 'train' or 'test', got {self.scope!r}")

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "rate": self.rate, "seed": self.seed, "scope": self.scope}


def observed_grid(ds: MultimodalDataset, scenario: str) -> np.ndarray:
    """Sample x unit observed grid: units are modalities or individual features."""
    if scenario == MISSING_MODALITIES:
        return np.column_stack([m.present for m in ds.modalities])
    if scenario == ALL_MISSING:
        return np.concatenate([m.observed for m in ds.modalities], axis=1)
    raise ValueError(f"unknown scenario {scenario!r}")


def missing_rate(ds: MultimodalDataset, scenario: str) -> float:
    """Pre-existing missing fraction (the dataset's omega) in scenario units."""
    grid = observed_grid(ds, scenario)
    return float(1.0 - grid.mean()) if grid.size else 0.0


def target_count(n_samples: int, width: int, rate: float, pre_missing: int) -> int:
    return max(0, math.ceil(n_samples * width * float(rate) - pre_missing - _CEIL_TOL))


def _draw_mask(observed: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``count`` observed cells to mask, then repair empty rows/columns.

    Returns the boolean grid of newly masked cells.
    """
    n_rows, n_cols = observed.shape
    if not observed.any(axis=1).all() or not observed.any(axis=0).all():
        raise InfeasibleInjection("data already contain a fully missing row or column")
    cells = np.flatnonzero(observed)
    if count > cells.size:
        raise InfeasibleInjection(f"need {count} cells but only {cells.size} are observed")
    new = np.zeros(observed.size, dtype=bool)
    new[rng.choice(cells, size=count, replace=False)] = True
    new = new.reshape(observed.shape)

    for _ in range(observed.size + 1):
        cur = observed & ~new
        row_cnt, col_cnt = cur.sum(axis=1), cur.sum(axis=0)
        empty_rows = np.flatnonzero(row_cnt == 0)
        empty_cols = np.flatnonzero(col_cnt == 0)
        if empty_rows.size == 0 and empty_cols.size == 0:
            return new
        if empty_rows.size:
            r = empty_rows[0]
            line = np.flatnonzero(new[r])
            restore = (r, line[rng.integers(line.size)])
        else:
            c = empty_cols[0]
            line = np.flatnonzero(new[:, c])
            restore = (line[rng.integers(line.size)], c)
        new[restore] = False
        cur = observed & ~new
        row_cnt, col_cnt = cur.sum(axis=1), cur.sum(axis=0)
        donors = cur & (row_cnt[:, None] >= 2) & (col_cnt[None, :] >= 2)
        donors[restore] = False
        flat = np.flatnonzero(donors)
        if flat.size == 0:
            raise InfeasibleInjection(
                f"cannot mask {count} of {n_rows}x{n_cols} cells while keeping every row and column observed")
        new.flat[flat[rng.integers(flat.size)]] = True
    raise InfeasibleInjection("mask repair did not converge")


def inject_mcar(ds: MultimodalDataset, plan: MissingnessPlan) -> MultimodalDataset:
    """Mask cells completely at random up to the plan's target rate.

    The number of newly masked units is ``ceil(N * width * p - pre_missing)``
    (never negative). Afterwards every sample keeps at least one observed
    unit and every unit stays observed in at least one sample.
    """
    if plan.rate == OMEGA:
        return ds
    grid = observed_grid(ds, plan.scenario)
    n, w = grid.shape
    count = target_count(n, w, plan.rate, int((~grid).sum()))
    if count == 0:
        return ds
    rng = np.random.default_rng(plan.seed)
    new = _draw_mask(grid, count, rng)
    observed = []
    if plan.scenario == MISSING_MODALITIES:
        for i, m in enumerate(ds.modalities):
            observed.append(m.observed & ~new[:, i][:, None])
    else:
        start = 0
        for m in ds.modalities:
            observed.append(m.observed & ~new[:, start:start + m.width])
            start += m.width
    return ds.with_observed(observed)


# ---------------------------------------------------------------------- regularizers


def _drop_some(flags: np.ndarray, apply_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Unset c of the set ``flags`` with c uniform on {1, ..., v-1}."""
    present = np.flatnonzero(flags)
    v = present.size
    if v <= 1 or rng.random() >= apply_prob:
        return flags
    c = int(rng.integers(1, v))
    out = flags.copy()
    out[rng.choice(present, size=c, replace=False)] = False
    return out


def modality_dropout(sample: list[np.ndarray], apply_prob: float,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Mask a random number of a sample's present modalities, keeping one.

    ``sample`` is the per-modality list of observed vectors for one sample.
    """
    present = np.array([o.any() for o in sample])
    keep = _drop_some(present, apply_prob, rng)
    if keep is present:
        return list(sample)
    return [o if k else np.zeros_like(o) for o, k in zip(sample, keep)]


def feature_dropout(modality_sample: np.ndarray, apply_prob: float,
                    rng: np.random.Generator) -> np.ndarray:
    return _drop_some(np.asarray(modality_sample, dtype=bool), apply_prob, rng)


def regularize(observed: list[np.ndarray], apply_prob: float,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Modality dropout then feature dropout on every sample of a batch.

    ``observed`` holds one ``[batch, width]`` array per modality; new arrays
    are returned and the inputs are left untouched.
    """
    out = [np.array(o, copy=True) for o in observed]
    for b in range(out[0].shape[0]):
        sample = modality_dropout([o[b] for o in out], apply_prob, rng)
        for i, o in enumerate(sample):
            if o.any():
                o = feature_dropout(o, apply_prob, rng)
            out[i][b] = o
    return out
