import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molhyper import tensor as T
from molhyper.model import ModelConfig, prepare
from molhyper.smiles import parse_smiles
from molhyper.tensor import Tensor
from molhyper.train import (
    AdamState,
    AllMasked,
    DegenerateTask,
    NumericFailure,
    TrainConfig,
    auroc,
    cosine_lr,
    dumps_metrics,
    fit_seed,
    macro_auroc,
    mse,
    optimizer_step,
    positive_weights,
    rmse,
    split_dataset,
    train_loop,
    weighted_bce,
    write_history,
)

from oracles import brute_auroc


# ---------------------------------------------------------------- metrics


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)))  # fmt: skip
def test_auroc_matches_pairwise_count(pair):
    scores, labels = pair
    if len(set(labels)) < 2:
        with pytest.raises(DegenerateTask):
            auroc(scores, labels)
        return
    assert auroc(scores, labels) == brute_auroc(scores, labels)


def test_auroc_exhaustive_small_lengths():
    # every labelling of length <= 6 with scores drawn from a tie-heavy grid
    rng = np.random.default_rng(0)
    for n in range(2, 7):
        for labels in itertools.product([0, 1], repeat=n):
            if len(set(labels)) < 2:
                continue
            scores = rng.integers(0, 3, n) / 2.0
            assert auroc(scores, labels) == brute_auroc(scores, labels)


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_macro_auroc_skips_single_class_tasks():
    scores = np.array([[0.1, 0.2], [0.9, 0.3], [0.4, 0.7]])
    labels = np.array([[0, 1], [1, 1], [0, 1]])
    missing = np.zeros_like(labels, dtype=bool)
    mean, per = macro_auroc(scores, labels, missing)
    assert per[1] is None and mean == per[0] == 1.0


# ---------------------------------------------------------------- losses


def test_bce_at_zero_logit_is_ln2():
    loss = weighted_bce(Tensor(np.zeros((1, 1))), np.ones((1, 1)), np.zeros((1, 1), bool))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(1, 4), st.integers(0, 10_000))
def test_weighted_bce_equals_plain_on_balanced_tasks(half, n_tasks, seed):
    rng = np.random.default_rng(seed)
    labels = np.vstack([np.ones((half, n_tasks)), np.zeros((half, n_tasks))])
    labels = labels[rng.permutation(2 * half)]
    missing = np.zeros(labels.shape, bool)
    w = positive_weights(labels, missing)
    assert (w == 1.0).all()
    logits = Tensor(rng.normal(size=labels.shape))
    assert weighted_bce(logits, labels, missing, w).item() == weighted_bce(logits, labels, missing).item()


def test_bce_matches_closed_form_with_weights():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 2))
    labels = np.array([[1, 0], [0, 0], [0, 1], [1, 0], [0, 0], [0, 1]], dtype=float)
    missing = np.zeros(labels.shape, bool)
    w = positive_weights(labels, missing)
    np.testing.assert_array_equal(w, [2.0, 2.0])
    s = 1 / (1 + np.exp(-logits))
    expected = -np.mean(w * labels * np.log(s) + (1 - labels) * np.log(1 - s))
    assert weighted_bce(Tensor(logits), labels, missing, w).item() == pytest.approx(expected, rel=1e-12)


def test_masked_row_is_excluded():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 3))
    labels = (rng.random((4, 3)) < 0.5).astype(float)
    missing = np.zeros((4, 3), bool)
    missing[2] = True
    full = weighted_bce(Tensor(logits), labels, missing).item()
    keep = [0, 1, 3]
    assert full == pytest.approx(weighted_bce(Tensor(logits[keep]), labels[keep], missing[keep]).item(), rel=1e-14)
    with pytest.raises(AllMasked):
        weighted_bce(Tensor(logits), labels, np.ones((4, 3), bool))


def test_mse_and_rmse_examples():
    y = np.random.default_rng(3).normal(size=(10, 1))
    assert mse(Tensor(y), y).item() == 0.0
    assert mse(Tensor(y + 1), y).item() == pytest.approx(1.0)
    assert rmse(y + 1, y) == pytest.approx(1.0)
    p = np.random.default_rng(4).normal(size=(10, 1))
    assert mse(Tensor(p), y).item() == pytest.approx(sum((a - b) ** 2 for a, b in zip(p[:, 0], y[:, 0])) / 10, rel=1e-14)


# ---------------------------------------------------------------- optimizer


def test_first_adam_step_moves_by_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    optimizer_step([("p", p)], AdamState(), lr=1e-3)
    assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_zero_grads_leave_params_unchanged():
    W = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    before = W.data.copy()
    W.grad = np.zeros_like(before)
    state = AdamState()
    for _ in range(3):
        optimizer_step([("W", W)], state, lr=1e-2, project={"W"})
    np.testing.assert_array_equal(W.data, before)


def test_projection_removes_radial_component():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(50, 4))
    grad = rng.normal(size=(50, 4))
    grad -= W * (W * grad).sum(axis=0) / (W * W).sum(axis=0)  # orthogonal per column
    a = Tensor(W.copy(), requires_grad=True)
    a.grad = grad
    optimizer_step([("W", a)], AdamState(), lr=1e-2, project={"W"})
    step = a.data - W
    cos = np.abs((step * W).sum(axis=0)) / (np.linalg.norm(step, axis=0) * np.linalg.norm(W, axis=0))
    assert cos.max() < 1e-8


def test_cosine_schedule_closed_form():
    assert cosine_lr(0, 500, 1e-3) == 1e-3
    assert abs(cosine_lr(500, 500, 1e-3)) < 1e-12
    for t in range(0, 501, 50):
        assert cosine_lr(t, 500, 1e-3) == pytest.approx(1e-3 * 0.5 * (1 + math.cos(math.pi * t / 500)))


# ---------------------------------------------------------------- splits


def test_split_sizes_and_determinism():
    for seed in range(5):
        tr, va, te = split_dataset(10, seed)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)
        assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(10))
    a, b = split_dataset(100, 7), split_dataset(100, 7)
    assert all((x == y).all() for x, y in zip(a, b))
    c = split_dataset(100, 8)
    assert not (np.concatenate(a) == np.concatenate(c)).all()
    tr, va, te = split_dataset(37, 0)
    assert (len(tr), len(va), len(te)) == (29, 3, 5)
    with pytest.raises(ValueError):
        split_dataset(10, 0, (0.5, 0.5, 0.5))


# ---------------------------------------------------------------- training loop

TOY = ["CCO", "CCCO", "CCCCO", "CC(=O)O", "CCC(=O)O", "c1ccccc1", "c1ccccc1O", "CCN", "CCCN", "CC(C)O",
       "OCCO", "c1ccncc1", "CC#N", "CCOCC", "CC(=O)N", "CCS"]  # fmt: skip


def toy_records(cfg):
    return [prepare(parse_smiles(s), cfg) for s in TOY]


def toy_labels():
    # learnable target: heavy atom count, scaled
    return np.array([[parse_smiles(s).n_atoms / 4.0] for s in TOY]), np.zeros((len(TOY), 1), bool)


def small_cfg(**kw):
    base = dict(latent_dim=16, task="regression", head_widths=[16], z_init="MEAN")
    base.update(kw)
    return ModelConfig(**base)


def test_loss_decreases_over_first_ten_epochs():
    cfg = small_cfg()
    y, miss = toy_labels()
    idx = (np.arange(len(TOY)), np.array([], int), np.array([], int))
    res = fit_seed(toy_records(cfg), y, miss, cfg, TrainConfig(epochs=10, lr0=1e-2, seeds=[0]), 0, indices=idx)
    losses = [h["train_loss"] for h in res.history]
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert all(b < a for a, b in zip(avg, avg[1:]))
    assert [h["lr"] for h in res.history] == [cosine_lr(e, 10, 1e-2) for e in range(10)]


def test_training_is_deterministic(tmp_path):
    cfg = small_cfg(variant="MolHMPN_K", k=1)
    y, miss = toy_labels()
    tc = TrainConfig(epochs=3, seeds=[0, 1], batch_size=4)
    _, r1 = train_loop(toy_records(cfg), y, miss, cfg, tc, "toy")
    _, r2 = train_loop(toy_records(cfg), y, miss, cfg, tc, "toy")
    assert dumps_metrics(r1) == dumps_metrics(r2)
    doc = json.loads(dumps_metrics(r1))
    assert set(doc) == {"variant", "k", "dataset", "metric_name", "seeds", "mean", "std"}
    assert [s["seed"] for s in doc["seeds"]] == [0, 1]


def test_classification_metrics_in_range():
    cfg = small_cfg(task="classification", n_tasks=2)
    y = np.array([[i % 2, (i // 2) % 2] for i in range(len(TOY))], dtype=float)
    miss = np.zeros(y.shape, bool)
    miss[3, 1] = True
    res, rep = train_loop(toy_records(cfg), y, miss, cfg, TrainConfig(epochs=2, seeds=[0]))
    assert res[0].train_metric is not None and 0.0 <= res[0].train_metric <= 1.0


def test_nan_loss_aborts_seed_with_diagnostics():
    cfg = small_cfg()
    y, miss = toy_labels()
    y[0, 0] = np.nan
    with pytest.raises(NumericFailure, match="seed 0 epoch 0"):
        fit_seed(toy_records(cfg), y, miss, cfg, TrainConfig(epochs=1, standardize=False), 0,
                 indices=(np.arange(len(TOY)), np.array([], int), np.array([], int)))  # fmt: skip
    results, rep = train_loop(toy_records(cfg), y, miss, cfg, TrainConfig(epochs=1, seeds=[0], ratios=[1.0, 0.0, 0.0], standardize=False))
    assert results[0].error and rep["mean"] is None


def test_history_csv(tmp_path):
    path = tmp_path / "h.csv"
    write_history(path, [{"epoch": 0, "lr": 0.001, "train_loss": 1.5, "valid_metric": float("nan")}])
    assert path.read_text().splitlines()[0] == "epoch,lr,train_loss,valid_metric"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"ratios": [0.5, 0.2, 0.2]})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})


def test_tape_not_left_active_after_failure():
    cfg = small_cfg()
    y, miss = toy_labels()
    y[0, 0] = np.inf
    with pytest.raises(NumericFailure):
        fit_seed(toy_records(cfg), y, miss, cfg, TrainConfig(epochs=1, standardize=False), 0,
                 indices=(np.arange(len(TOY)), np.array([], int), np.array([], int)))  # fmt: skip
    x = Tensor(np.ones(2), requires_grad=True)
    assert T.mul(x, 2.0).tape is None
