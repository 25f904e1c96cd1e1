"""Cross-validated missing-rate grids and the kNN imputation baseline."""
from __future__ import annotations

import logging
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Modality, MultimodalDataset, apply_preprocessor, fit_preprocessor, one_hot, stratified_splits
from .masking import OMEGA, SCENARIOS, InfeasibleInjection, MissingnessPlan, inject_mcar, missing_rate
from .metrics import DegenerateMCCWarning, UndefinedMetricError, auc, mcc
from .model import FUSION_MODES, INTERMEDIATE, EncoderConfig, build_model
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger(__name__)

IMPUTERS = ("none", "knn")
METRICS = ("auc", "mcc")


# ---------------------------------------------------------------------- kNN imputation


def _pairwise(x, o, xt, ot):
    """Squared distances over mutually observed columns, rescaled to all columns."""
    xo, xto = x * o, xt * ot
    sq = (xo**2) @ ot.T + o @ (xto**2).T - 2.0 * xo @ xto.T
    shared = o @ ot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(shared > 0, np.maximum(sq, 0.0) * o.shape[1] / shared, np.inf)
    return d


def knn_impute(ds: MultimodalDataset, train_indices, k: int = 5) -> MultimodalDataset:
    """Fill every missing cell from the ``k`` nearest training samples.

    Distances use the one-hot encoding over mutually observed columns,
    scaled by ``n_columns / n_shared``. Numerical cells take the donors'
    mean, categorical cells their mode (lowest code on ties). A cell with no
    reachable donor falls back to the training column mean/mode.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    train = np.asarray(train_indices, dtype=np.intp)
    x, o, _ = one_hot(ds)
    o = o.astype(np.float64)
    dist = _pairwise(x, o, x[train], o[train])
    dist[train, np.arange(train.size)] = np.inf  # a sample never donates to itself
    new_mods = []
    for m in ds.modalities:
        values = np.array(m.values, copy=True)
        obs_tr = m.observed[train]
        for j, feat in enumerate(m.schema):
            missing = np.flatnonzero(~m.observed[:, j])
            if missing.size == 0:
                continue
            donors = np.flatnonzero(obs_tr[:, j])
            pool = m.values[train[donors], j]
            if pool.size == 0:
                log.warning("feature %s.%s unobserved in training; filling 0", m.name, feat.name)
                values[missing, j] = 0.0
                continue
            fallback = _mode(pool) if feat.is_categorical else pool.mean()
            for i in missing:
                d = dist[i, donors]
                finite = np.flatnonzero(np.isfinite(d))
                if finite.size == 0:
                    values[i, j] = fallback
                    continue
                near = finite[np.argsort(d[finite], kind="stable")[:k]]
                picked = pool[near]
                values[i, j] = _mode(picked) if feat.is_categorical else picked.mean()
        new_mods.append(Modality(m.name, m.schema, values, np.ones_like(m.observed)))
    return ds.with_modalities(new_mods)


def _mode(codes: np.ndarray) -> float:
    vals, counts = np.unique(codes, return_counts=True)
    return float(vals[np.argmax(counts)])


# ---------------------------------------------------------------------- grid types


@dataclass(frozen=True)
class MetricResult:
    metric: str
    fold_values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values))

    @property
    def value(self) -> float:
        return self.mean


@dataclass(frozen=True)
class GridSpec:
    train_rates: tuple = (OMEGA, 0.3)
    test_rates: tuple = (OMEGA, 0.1, 0.5)
    scenarios: tuple = SCENARIOS
    fusion_modes: tuple = (INTERMEDIATE,)
    imputers: tuple = ("none",)
    folds: int = 5
    val_fraction: float = 0.2
    knn_k: int = 5

    def __post_init__(self):
        for name in ("train_rates", "test_rates", "scenarios", "fusion_modes", "imputers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for r in self.train_rates + self.test_rates:
            if r != OMEGA and not (isinstance(r, (int, float)) and 0 <= r < 1):
                raise ValueError(f"rate {r!r} must be 'omega' or a number in [0, 1)")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        for f in self.fusion_modes:
            if f not in FUSION_MODES:
                raise ValueError(f"unknown fusion mode {f!r}")
        for i in self.imputers:
            if i not in IMPUTERS:
                raise ValueError(f"unknown imputer {i!r}")
        if self.folds < 2 or not 0 < self.val_fraction < 1:
            raise ValueError("folds must be >= 2 and val_fraction in (0, 1)")


def model_name(fusion: str) -> str:
    return "MARIA" if fusion == INTERMEDIATE else "NAIM"


def imputer_label(imputer: str) -> str:
    return "with" if imputer == "knn" else "without"


def rate_key(rate) -> str:
    return OMEGA if rate == OMEGA else f"{float(rate):.4f}"


def rate_sort_key(rate):
    return (-1.0,) if rate == OMEGA else (float(rate),)


def effective_rate(rate, omega: float):
    """Rates at or below the pre-existing missing rate collapse to omega."""
    if rate == OMEGA or float(rate) <= omega + 1e-12:
        return OMEGA
    return float(rate)


@dataclass
class ExperimentGrid:
    spec: GridSpec
    seed: int
    omega: dict[str, float]
    aliases: dict[str, dict[str, str]]
    records: list[dict] = field(default_factory=list)

    def cell_keys(self) -> list[tuple]:
        seen = {}
        for r in self.records:
            seen.setdefault(_cell_of(r), None)
        return list(seen)

    def cell(self, scenario, fusion, imputer, train_rate, test_rate) -> dict[str, MetricResult] | None:
        key = (scenario, fusion, imputer, rate_key(train_rate), rate_key(test_rate))
        recs = [r for r in self.records if _cell_of(r) == key]
        if not recs or any(r["status"] != "ok" for r in recs):
            return None
        recs.sort(key=lambda r: r["fold"])
        return {m: MetricResult(m, tuple(r[m] for r in recs)) for m in METRICS}


def _cell_of(r: dict) -> tuple:
    return (r["scenario"], r["fusion"], r["imputer"], rate_key(r["train_rate"]), rate_key(r["test_rate"]))


# ---------------------------------------------------------------------- grid execution


def derive_seed(master: int, *parts) -> int:
    """Stable sub-seed from a master seed and a tuple of labels."""
    tag = zlib.crc32("|".join(str(p) for p in parts).encode())
    return int(np.random.SeedSequence([int(master), tag]).generate_state(1)[0])


def _stack(a: MultimodalDataset, b: MultimodalDataset) -> MultimodalDataset:
    mods = [Modality(x.name, x.schema, np.vstack([x.values, y.values]), np.vstack([x.observed, y.observed]))
            for x, y in zip(a.modalities, b.modalities)]
    return MultimodalDataset(mods, np.concatenate([a.labels, b.labels]), a.class_names,
                             a.sample_ids + b.sample_ids)


@dataclass(frozen=True)
class _Job:
    scenario: str
    fusion: str
    imputer: str
    train_rate: object
    fold: int


def score_model(model, test: MultimodalDataset) -> dict:
    """AUC and MCC on ``test``; ``mcc_degenerate`` marks a zero MCC denominator."""
    probs = model.predict_proba(test)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateMCCWarning)
        m = mcc(probs.argmax(axis=1), test.labels, test.n_classes)
    degenerate = any(issubclass(w.category, DegenerateMCCWarning) for w in caught)
    return {"auc": auc(probs, test.labels), "mcc": m, "mcc_degenerate": degenerate}


def _run_job(ds: MultimodalDataset, job: _Job, splits, test_rates, spec: GridSpec,
             enc_cfg: EncoderConfig, train_cfg: TrainConfig, seed: int) -> list[dict]:
    base = {"scenario": job.scenario, "fusion": job.fusion, "model": model_name(job.fusion),
            "imputer": job.imputer, "train_rate": job.train_rate, "fold": job.fold}

    def skipped(reason, rates=test_rates):
        return [dict(base, test_rate=r, status="skipped", reason=reason, auc=None, mcc=None,
                     mcc_degenerate=None) for r in rates]

    train_idx, val_idx, test_idx = splits[job.fold]
    trval = ds.subset(np.concatenate([train_idx, val_idx]))
    plan = MissingnessPlan(job.scenario, job.train_rate,
                           derive_seed(seed, job.scenario, "train", rate_key(job.train_rate), job.fold), "train")
    try:
        trval = inject_mcar(trval, plan)
    except InfeasibleInjection as e:
        return skipped(f"train injection infeasible: {e}")
    n_tr = train_idx.size
    local_train = np.arange(n_tr)
    local_val = np.arange(n_tr, trval.n_samples)
    prep = fit_preprocessor(trval, local_train)
    trval = apply_preprocessor(prep, trval)
    if job.imputer == "knn":
        trval = knn_impute(trval, local_train, spec.knn_k)

    model_seed = derive_seed(seed, "model", job.scenario, job.fusion, job.imputer, rate_key(job.train_rate), job.fold)
    model = build_model(job.fusion, ds.schemas, ds.n_classes, enc_cfg, model_seed)
    cfg = replace(train_cfg, seed=derive_seed(seed, "train-loop", job.scenario, job.fusion, job.imputer,
                                              rate_key(job.train_rate), job.fold))
    try:
        model, _ = train(model, trval, (local_train, local_val), cfg)
    except DivergenceError as e:
        return skipped(f"diverged: {e}")

    out = []
    test_base = ds.subset(test_idx)
    for rate in test_rates:
        tplan = MissingnessPlan(job.scenario, rate,
                                derive_seed(seed, job.scenario, "test", rate_key(rate), job.fold), "test")
        try:
            test = apply_preprocessor(prep, inject_mcar(test_base, tplan))
        except InfeasibleInjection as e:
            out.extend(skipped(f"test injection infeasible: {e}", [rate]))
            continue
        if job.imputer == "knn":
            both = knn_impute(_stack(trval, test), local_train, spec.knn_k)
            test = both.subset(np.arange(trval.n_samples, both.n_samples))
        try:
            scores = score_model(model, test)
        except UndefinedMetricError as e:
            out.extend(skipped(f"metric undefined: {e}", [rate]))
            continue
        out.append(dict(base, test_rate=rate, status="ok", reason=None, **scores))
    return out


def _run_job_star(args):
    return _run_job(*args)


def run_grid(ds: MultimodalDataset, spec: GridSpec = GridSpec(), enc_cfg: EncoderConfig = EncoderConfig(),
             train_cfg: TrainConfig = TrainConfig(), seed: int = 0, workers: int = 1) -> ExperimentGrid:
    """Stratified k-fold evaluation over train rate x test rate x scenario x fusion x imputer.

    Each (scenario, fusion, imputer, train rate, fold) trains one model that
    is then scored on every test rate. Requested rates at or below the
    dataset's pre-existing missing rate are collapsed to the omega cell.
    """
    splits = stratified_splits(ds, spec.folds, spec.val_fraction, derive_seed(seed, "splits"))
    omega = {s: missing_rate(ds, s) for s in spec.scenarios}
    aliases: dict[str, dict[str, str]] = {}
    jobs, job_test_rates = [], []
    for scenario in spec.scenarios:
        eff = {}
        for r in spec.train_rates + spec.test_rates:
            e = effective_rate(r, omega[scenario])
            if rate_key(r) != rate_key(e):
                eff[rate_key(r)] = rate_key(e)
        aliases[scenario] = eff
        train_rates = _unique(effective_rate(r, omega[scenario]) for r in spec.train_rates)
        test_rates = _unique(effective_rate(r, omega[scenario]) for r in spec.test_rates)
        for fusion in spec.fusion_modes:
            for imputer in spec.imputers:
                for tr in train_rates:
                    for fold in range(spec.folds):
                        jobs.append(_Job(scenario, fusion, imputer, tr, fold))
                        job_test_rates.append(test_rates)
    args = [(ds, j, splits, t, spec, enc_cfg, train_cfg, seed) for j, t in zip(jobs, job_test_rates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job_star, args))
    else:
        results = [_run_job_star(a) for a in args]
    # single collector keyed by (cell, fold) so ordering never depends on scheduling
    records = sorted((r for res in results for r in res), key=_record_order(spec))
    return ExperimentGrid(spec, seed, omega, aliases, records)


def _unique(rates) -> list:
    seen = {}
    for r in rates:
        seen.setdefault(rate_key(r), r)
    return sorted(seen.values(), key=rate_sort_key)


def _record_order(spec: GridSpec):
    def key(r):
        return (spec.scenarios.index(r["scenario"]), spec.fusion_modes.index(r["fusion"]),
                spec.imputers.index(r["imputer"]), rate_sort_key(r["train_rate"]),
                rate_sort_key(r["test_rate"]), r["fold"])
    return key
