import csv

import numpy as np
import pytest

from qforge import train as TR
from qforge.data import MinMax, WindowSet
from qforge.errors import ContractError, DataError, ShapeError, TrainingError
from qforge.model import ModelConfig, build
from qforge.tensor import Tensor, parameter


def test_adam_first_step_is_lr_sign():
    p = parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 0.0])
    TR.Adam([p], lr=0.1).step()
    # bias-corrected first step moves every coordinate with non-zero gradient by ~lr
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_clip_grad_norm():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert TR.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-9)


def test_losses_match_numpy():
    rng = np.random.default_rng(0)
    pred, tgt = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    assert TR.mse_loss(Tensor(pred), tgt).item() == pytest.approx(np.mean((pred - tgt) ** 2))
    logits, labels = rng.normal(size=(5, 3)), np.array([0, 2, 1, 1, 0])
    lse = np.log(np.exp(logits).sum(1))
    assert TR.cross_entropy_loss(Tensor(logits), labels).item() == pytest.approx(np.mean(lse - logits[np.arange(5), labels]))


def test_loss_contracts():
    with pytest.raises(ShapeError):
        TR.mse_loss(Tensor(np.zeros((2, 1))), np.zeros((3, 1)))
    with pytest.raises(ContractError):
        TR.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_metrics():
    mm = MinMax(np.array([10.0]), np.array([20.0]))
    assert TR.metric("forecasting", np.array([[0.5]]), np.array([[0.7]]), mm) == pytest.approx(2.0)
    assert TR.metric("classification", np.array([[0.1, 0.9], [0.8, 0.2]]), [1, 1]) == 0.5
    with pytest.raises(ContractError):
        TR.metric("forecasting", [[0.0]], [[0.0]])


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr=0.0), dict(patience=10, max_epochs=10)])
def test_trainspec_contract(kw):
    with pytest.raises(ContractError):
        TR.TrainSpec(**kw)


def toy_sets(seed=0, n=6):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (120, n, 1))
    y = X.mean(axis=(1, 2))[:, None]
    return WindowSet(X[:90], y[:90]), WindowSet(X[90:], y[90:])


@pytest.mark.parametrize("mode", ["float", "qat"])
def test_fit_reduces_loss_and_logs(tmp_path, mode):
    train, val = toy_sets()
    model = build(ModelConfig(n=6, m=1, k=1, d_model=8), seed=0, mode=mode)
    spec = TR.TrainSpec(batch_size=16, lr=3e-3, max_epochs=8, patience=3)
    fr = TR.fit(model, train, val, spec, log_path=tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == TR.LOG_COLUMNS and len(rows) == len(fr.history)
    assert fr.best_val_loss == min(h["val_loss"] for h in fr.history)
    assert fr.history[fr.best_epoch - 1]["val_loss"] == fr.best_val_loss
    # the restored model is the best epoch's
    assert TR.evaluate_loss(fr.model, val, "mse") == pytest.approx(fr.best_val_loss, rel=1e-12)
    assert fr.best_val_loss < fr.history[0]["train_loss"]
    if mode == "qat":
        assert fr.model.observers_frozen


def test_fit_deterministic():
    train, val = toy_sets()
    spec = TR.TrainSpec(batch_size=16, lr=3e-3, max_epochs=4, patience=2)
    a = TR.fit(build(ModelConfig(n=6, m=1, k=1, d_model=8), 1, "qat"), train, val, spec)
    b = TR.fit(build(ModelConfig(n=6, m=1, k=1, d_model=8), 1, "qat"), train, val, spec)
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]


def test_early_stopping_respects_patience():
    train, val = toy_sets()
    spec = TR.TrainSpec(batch_size=90, lr=1e-2, max_epochs=60, patience=2)
    fr = TR.fit(build(ModelConfig(n=6, m=1, k=1, d_model=8), 0), train, val, spec)
    assert len(fr.history) - fr.best_epoch <= 2
    if len(fr.history) < 60:
        assert len(fr.history) - fr.best_epoch == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    train, val = toy_sets()
    train.inputs[0, 0, 0] = np.inf
    with pytest.raises(TrainingError):
        TR.fit(build(ModelConfig(n=6, m=1, k=1, d_model=8), 0), train, val, TR.TrainSpec(max_epochs=3, patience=1))


def test_empty_split():
    train, val = toy_sets()
    with pytest.raises(DataError):
        TR.fit(build(ModelConfig(n=6, m=1, k=1, d_model=8), 0), train, val.subset(slice(0, 0)), TR.TrainSpec(max_epochs=3, patience=1))
