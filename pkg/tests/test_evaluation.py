import numpy as np
import pytest

from maria.data import FeatureSchema, Modality, MultimodalDataset, synthesize_dataset
from maria.evaluation import (ExperimentGrid, GridSpec, MetricResult, derive_seed, effective_rate, knn_impute,
                              run_grid)
from maria.masking import ALL_MISSING, MISSING_MODALITIES, OMEGA, MissingnessPlan, inject_mcar
from maria.model import EncoderConfig
from maria.training import TrainConfig
from helpers import make_dataset
from oracles import brute_knn_fill

TINY = EncoderConfig(d_e=4, heads=2, layers=1, shared_layers=1, ff_width=8)
FAST = TrainConfig(max_epochs=2, patience=2, batch_size=64)
NAN = np.nan


def numeric_ds(rows):
    rows = np.asarray(rows, dtype=float)
    obs = ~np.isnan(rows)
    schema = tuple(FeatureSchema(f"f{j}") for j in range(rows.shape[1]))
    mod = Modality("m", schema, np.nan_to_num(rows, nan=-5.0), obs)
    return MultimodalDataset((mod,), np.arange(rows.shape[0]) % 2, ("a", "b"))


# ---------------------------------------------------------------------- kNN


def test_knn_single_neighbor_value():
    ds = numeric_ds([[0.0, 7.0], [0.1, NAN], [5.0, 1.0]])
    out = knn_impute(ds, [0, 2], k=1)
    assert out.modalities[0].values[1, 1] == 7.0
    assert out.modalities[0].observed.all()


def test_knn_identical_neighbors():
    ds = numeric_ds([[1.0, 3.0], [2.0, 3.0], [9.0, 3.0], [4.0, NAN]])
    for k in (1, 2, 3):
        assert knn_impute(ds, [0, 1, 2], k).modalities[0].values[3, 1] == 3.0


TOY_ROWS = [[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [4.0, NAN], [NAN, 2.0]]


def test_knn_hand_computed_fixture():
    # s3.f1: distances over f0 scaled by 2/1 -> s1 18, s0 32, s2 32, s4 unreachable
    # s4.f0: distances over f1 scaled by 2/1 -> s2 2, s0 8, s1 8, s3 unreachable
    out = knn_impute(numeric_ds(TOY_ROWS), range(5), k=3).modalities[0].values
    assert out[3, 1] == pytest.approx(1.0, abs=1e-15)
    assert out[4, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)
    out1 = knn_impute(numeric_ds(TOY_ROWS), range(5), k=1).modalities[0].values
    assert out1[3, 1] == 0.0 and out1[4, 0] == 0.0


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_knn_matches_brute_force(k):
    rng = np.random.default_rng(k)
    rows = rng.normal(size=(12, 4))
    rows[rng.random(rows.shape) < 0.25] = NAN
    rows[:, 0] = np.where(np.isnan(rows[:, 0]), 0.5, rows[:, 0])
    train = list(range(9))
    out = knn_impute(numeric_ds(rows), train, k).modalities[0].values
    obs = ~np.isnan(rows)
    for i, j in zip(*np.nonzero(~obs)):
        ref = brute_knn_fill(rows.tolist(), obs.tolist(), train, i, j, k)
        assert out[i, j] == pytest.approx(ref, abs=1e-12)


def test_knn_no_shared_feature_falls_back_to_mean():
    ds = numeric_ds([[1.0, NAN], [3.0, NAN], [NAN, 5.0], [NAN, 9.0]])
    out = knn_impute(ds, [0, 1, 2], k=2).modalities[0].values
    assert out[2, 0] == 2.0  # shares nothing with the f0 donors
    assert out[3, 0] == 2.0


def test_knn_categorical_mode():
    ds = make_dataset([np.ones((6, 2), bool)], seed=0, categorical={(0, 1)})
    vals = np.array(ds.modalities[0].values)
    vals[:, 0] = [0.0, 0.1, 0.2, 5.0, 5.1, 0.05]
    vals[:, 1] = [2, 2, 1, 0, 0, 0]
    obs = np.ones((6, 2), bool)
    obs[5, 1] = False
    ds = ds.with_modalities([ds.modalities[0].replace(values=vals, observed=obs)])
    out = knn_impute(ds, range(5), k=3).modalities[0].values
    assert out[5, 1] == 2.0


def test_knn_leaves_observed_cells():
    rows = np.random.default_rng(0).normal(size=(8, 3))
    rows[2, 1] = NAN
    out = knn_impute(numeric_ds(rows), range(8), k=2).modalities[0].values
    mask = ~np.isnan(rows)
    assert np.array_equal(out[mask], rows[mask])


# ---------------------------------------------------------------------- grid helpers


def test_effective_rate_aliasing():
    assert effective_rate(0.05, 0.10) == OMEGA
    assert effective_rate(0.10, 0.10) == OMEGA
    assert effective_rate(0.3, 0.10) == 0.3
    assert effective_rate(OMEGA, 0.0) == OMEGA


def test_metric_result_mean():
    r = MetricResult("auc", (0.5, 0.7, 0.9))
    assert r.mean == pytest.approx(0.7, abs=1e-15)


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(3, "a", 1) == derive_seed(3, "a", 1)
    assert derive_seed(3, "a", 1) != derive_seed(3, "a", 2)
    assert derive_seed(3, "a") != derive_seed(4, "a")


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(train_rates=(1.2,))
    with pytest.raises(ValueError):
        GridSpec(imputers=("mice",))


# ---------------------------------------------------------------------- run_grid


@pytest.fixture(scope="module")
def synth():
    return synthesize_dataset(7, 100, [3, 2], 2, {"shift": 1.5})


@pytest.fixture(scope="module")
def small_grid(synth):
    spec = GridSpec(train_rates=(OMEGA, 0.3), test_rates=(OMEGA, 0.5), scenarios=(ALL_MISSING,))
    return run_grid(synth, spec, TINY, FAST, seed=11)


def test_two_by_two_grid_bookkeeping(small_grid):
    assert len(small_grid.cell_keys()) == 4
    assert len(small_grid.records) == 20
    assert all(r["status"] == "ok" for r in small_grid.records)
    trains = {r["train_rate"] for r in small_grid.records}
    assert trains == {OMEGA, 0.3}
    for key in small_grid.cell_keys():
        cell = small_grid.cell(*key)
        assert len(cell["auc"].fold_values) == 5
        assert 0.0 <= cell["auc"].mean <= 1.0 and -1.0 <= cell["mcc"].mean <= 1.0


def test_grid_is_deterministic(synth, small_grid):
    again = run_grid(synth, small_grid.spec, TINY, FAST, seed=11)
    assert again.records == small_grid.records


def test_grid_seed_changes_results(synth, small_grid):
    other = run_grid(synth, small_grid.spec, TINY, FAST, seed=12)
    assert [r["auc"] for r in other.records] != [r["auc"] for r in small_grid.records]


def test_rates_below_omega_alias_to_omega_cell(synth):
    rng = np.random.default_rng(0)
    obs = [rng.random(m.observed.shape) >= 0.1 for m in synth.modalities]
    obs[0][:, 0] = True
    ds = synth.with_observed(obs)
    spec = GridSpec(train_rates=(0.05, 0.3), test_rates=(OMEGA, 0.05), scenarios=(ALL_MISSING,))
    grid = run_grid(ds, spec, TINY, FAST, seed=1)
    assert grid.omega[ALL_MISSING] > 0.05
    assert grid.aliases[ALL_MISSING] == {"0.0500": OMEGA}
    assert {r["train_rate"] for r in grid.records} == {OMEGA, 0.3}
    assert {r["test_rate"] for r in grid.records} == {OMEGA}


def test_infeasible_cells_are_skipped_with_reason(synth):
    spec = GridSpec(train_rates=(OMEGA,), test_rates=(OMEGA, 0.75), scenarios=(MISSING_MODALITIES,))
    grid = run_grid(synth, spec, TINY, FAST, seed=0)
    bad = [r for r in grid.records if r["test_rate"] == 0.75]
    assert len(bad) == 5 and all(r["status"] == "skipped" and "infeasible" in r["reason"] for r in bad)
    assert grid.cell(MISSING_MODALITIES, "intermediate", "none", OMEGA, 0.75) is None
    assert grid.cell(MISSING_MODALITIES, "intermediate", "none", OMEGA, OMEGA) is not None


def test_all_fusions_and_imputers_run(synth):
    spec = GridSpec(train_rates=(0.3,), test_rates=(0.3,), scenarios=(ALL_MISSING,),
                    fusion_modes=("intermediate", "early", "late"), imputers=("none", "knn"), folds=2)
    grid = run_grid(synth, spec, TINY, FAST, seed=0)
    assert len(grid.records) == 12
    assert all(r["status"] == "ok" for r in grid.records)
    assert {r["model"] for r in grid.records} == {"MARIA", "NAIM"}


def test_parallel_workers_match_serial(synth):
    spec = GridSpec(train_rates=(0.3,), test_rates=(OMEGA, 0.3), scenarios=(ALL_MISSING,), folds=2)
    serial = run_grid(synth, spec, TINY, FAST, seed=5, workers=1)
    parallel = run_grid(synth, spec, TINY, FAST, seed=5, workers=2)
    assert serial.records == parallel.records


def test_auc_degrades_with_test_missingness():
    """Three seeds: AUC on complete test data beats AUC with 75% of cells masked."""
    cfg = EncoderConfig(d_e=8, heads=2, layers=1, shared_layers=1, ff_width=16)
    tcfg = TrainConfig(max_epochs=40, patience=8, learning_rate=3e-3)
    for seed in range(3):
        ds = synthesize_dataset(seed, 300, [4, 3], 2, {"shift": 1.0})
        spec = GridSpec(train_rates=(0.3,), test_rates=(OMEGA, 0.75), scenarios=(ALL_MISSING,), folds=2)
        grid = run_grid(ds, spec, cfg, tcfg, seed=seed)
        full = grid.cell(ALL_MISSING, "intermediate", "none", 0.3, OMEGA)["auc"].mean
        sparse = grid.cell(ALL_MISSING, "intermediate", "none", 0.3, 0.75)["auc"].mean
        assert full > sparse, (seed, full, sparse)
