import numpy as np
import pytest

from maria import numerics as nx
from maria.data import stratified_splits, synthesize_dataset
from maria.masking import ALL_MISSING, MissingnessPlan, inject_mcar
from maria.model import EmbeddingTable, EncoderConfig, build_model
from maria.numerics import Tensor
from maria.training import AdamState, DivergenceError, TrainConfig, TrainReport, adam_step, train

SMALL = EncoderConfig(d_e=8, heads=2, layers=1, shared_layers=1, ff_width=16)


@pytest.fixture(scope="module")
def separable():
    ds = synthesize_dataset(7, 400, [4, 3], 2, {"shift": 1.0})
    train_idx, val_idx, _ = stratified_splits(ds, 5, 0.2, seed=0)[0]
    return ds, train_idx, val_idx


def quick(**kw):
    base = dict(max_epochs=6, patience=6, batch_size=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------- adam


def test_first_adam_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    g = np.array([0.5, -3.0, 1e-3])
    adam_step([p], [g], AdamState(), 0.01)
    assert np.allclose(p.values - np.array([1.0, -2.0, 3.0]), -0.01 * np.sign(g), rtol=1e-4, atol=0)


def test_zero_gradient_does_not_move():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = AdamState()
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, 0.1)
    assert p.values.tolist() == [1.0, 2.0]


def test_quadratic_bowl_converges():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    state = AdamState()
    for step in range(5000):
        if np.all(np.abs(x.values) < 1e-3):
            break
        adam_step([x], [2.0 * x.values], state, 1e-2)
    assert np.all(np.abs(x.values) < 1e-3), step


# ---------------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"patience": 10, "max_epochs": 5},
                                {"optimizer": "sgd"}, {"apply_prob": 1.5}, {"batch_size": 0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---------------------------------------------------------------------- train


def test_separable_task_reaches_val_accuracy(separable):
    ds, tr, va = separable
    model = build_model("intermediate", ds.schemas, 2, SMALL, seed=0)
    model, report = train(model, ds, (tr, va), TrainConfig(max_epochs=200, patience=25, seed=0,
                                                           learning_rate=3e-3))
    acc = float((model.predict_proba(ds.subset(va)).argmax(axis=1) == ds.labels[va]).mean())
    assert acc >= 0.9
    assert report.epochs_run <= 200
    assert 0 <= report.best_epoch < report.epochs_run


def test_seed_identical_runs_give_identical_reports(separable):
    ds, tr, va = separable
    reports = []
    for _ in range(2):
        model = build_model("intermediate", ds.schemas, 2, SMALL, seed=4)
        _, rep = train(model, ds, (tr, va), quick())
        reports.append(rep)
    assert reports[0] == reports[1]


def test_patience_zero_stops_one_epoch_after_best(separable):
    ds, tr, va = separable
    model = build_model("early", ds.schemas, 2, SMALL, seed=1)
    _, rep = train(model, ds, (tr, va), TrainConfig(max_epochs=300, patience=0, learning_rate=0.05, seed=0))
    assert rep.epochs_run == rep.best_epoch + 2
    assert rep.val_loss[-1] >= min(rep.val_loss)


def test_best_parameters_are_restored(separable):
    ds, tr, va = separable
    model = build_model("intermediate", ds.schemas, 2, SMALL, seed=2)
    model, rep = train(model, ds, (tr, va), quick(learning_rate=0.05, patience=2, max_epochs=20))
    with nx.no_grad():
        loss = nx.cross_entropy(model.forward(ds.batch(va)), ds.labels[va]).item()
    assert loss == pytest.approx(rep.val_loss[rep.best_epoch], rel=1e-12)


def test_source_dataset_untouched_and_missing_row_frozen():
    ds = synthesize_dataset(3, 120, [3, 3], 2, {"categorical": 1})
    ds = inject_mcar(ds, MissingnessPlan(ALL_MISSING, 0.3, seed=1))
    before = [(m.values.tobytes(), m.observed.tobytes()) for m in ds.modalities]
    model = build_model("intermediate", ds.schemas, 2, SMALL, seed=0)
    train(model, ds, (np.arange(90), np.arange(90, 120)), quick(apply_prob=1.0))
    assert [(m.values.tobytes(), m.observed.tobytes()) for m in ds.modalities] == before
    for name, p in model.named_parameters():
        if name.endswith("table"):
            assert np.all(p.values[EmbeddingTable.MISSING_ROW] == 0.0)


def test_first_batch_loss_decreases_over_ten_steps():
    wins = 0
    for seed in range(3):
        ds = synthesize_dataset(seed, 200, [4, 3], 2, {"shift": 1.0})
        model = build_model("intermediate", ds.schemas, 2, SMALL, seed=seed)
        params = model.parameters()
        idx = np.arange(64)
        batch = ds.batch(idx)
        state = AdamState()
        losses = []
        for _ in range(10):
            loss = nx.cross_entropy(model.forward(batch), ds.labels[idx])
            losses.append(loss.item())
            nx.backward(loss)
            adam_step(params, [p.grad for p in params], state, 1e-3)
            model.zero_grad()
        with nx.no_grad():
            final = nx.cross_entropy(model.forward(batch), ds.labels[idx]).item()
        wins += final < losses[0]
    assert wins >= 2


def test_divergence_is_reported(separable):
    ds, tr, va = separable
    model = build_model("intermediate", ds.schemas, 2, SMALL, seed=0)
    model.head.bias.values = np.array([np.nan, 0.0])
    with pytest.raises(DivergenceError, match="non-finite"):
        train(model, ds, (tr, va), quick())
    assert len(nx.current_tape()) == 0


def test_sample_without_observed_feature_rejected():
    ds = synthesize_dataset(0, 60, [2, 2])
    obs = [m.observed.copy() for m in ds.modalities]
    for o in obs:
        o[3] = False
    ds = ds.with_observed(obs)
    model = build_model("intermediate", ds.schemas, 2, SMALL)
    with pytest.raises(ValueError, match="observed"):
        train(model, ds, (np.arange(50), np.arange(50, 60)), quick())


def test_late_fusion_trains_each_member(separable):
    ds, tr, va = separable
    model = build_model("late", ds.schemas, 2, SMALL, seed=0)
    _, rep = train(model, ds, (tr, va), quick())
    assert len(rep.members) == 2
    assert all(isinstance(m, TrainReport) and m.epochs_run >= 1 for m in rep.members)


def test_class_weighting_runs(separable):
    ds, tr, va = separable
    keep = np.concatenate([tr[ds.labels[tr] == 0], tr[ds.labels[tr] == 1][:40]])
    model = build_model("intermediate", ds.schemas, 2, SMALL, seed=0)
    _, rep = train(model, ds, (keep, va), quick(class_weighting=True, max_epochs=2, patience=2))
    assert np.isfinite(rep.train_loss).all()
