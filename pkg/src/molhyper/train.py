"""Losses, optimizer, schedule, splits, metrics and the multi-seed training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, MolRecord, collate, forward
from .structlearn import temperature_at
from .tensor import Tensor

log = logging.getLogger(__name__)


class AllMasked(ValueError):
    """Every label entry in the batch is missing."""


class DegenerateTask(ValueError):
    """A task has only one class among its observed labels."""


class NumericFailure(ArithmeticError):
    """Loss or gradient became non-finite."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def positive_weights(labels: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Per-task #neg/#pos over observed entries; 1 when a class is absent."""
    obs = ~missing
    pos = ((labels == 1) & obs).sum(axis=0).astype(np.float64)
    neg = ((labels == 0) & obs).sum(axis=0).astype(np.float64)
    return np.where((pos > 0) & (neg > 0), neg / np.maximum(pos, 1), 1.0)


def weighted_bce(logits: Tensor, labels: np.ndarray, missing: np.ndarray, pos_weight: np.ndarray | None = None) -> Tensor:
    """Mean over observed entries of -[w1 y log s(l) + (1-y) log(1-s(l))]."""
    labels = np.asarray(labels, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    if logits.shape != labels.shape or labels.shape != missing.shape:
        raise T.ShapeMismatch(f"logits {logits.shape}, labels {labels.shape}, mask {missing.shape} differ")
    n_obs = int((~missing).sum())
    if n_obs == 0:
        raise AllMasked("every label entry is missing")
    w1 = np.ones(labels.shape[1]) if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
    obs = (~missing).astype(np.float64)
    pos_coef = obs * labels * w1[None, :]
    neg_coef = obs * (1.0 - labels)
    per = T.add(T.mul(T.log_sigmoid(logits), pos_coef), T.mul(T.log_sigmoid(T.mul(logits, -1.0)), neg_coef))
    return T.mul(T.sum_all(per), -1.0 / n_obs)


def mse(values: Tensor, labels: np.ndarray, missing: np.ndarray | None = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if values.shape != labels.shape:
        raise T.ShapeMismatch(f"values {values.shape} vs labels {labels.shape}")
    obs = np.ones(labels.shape) if missing is None else (~np.asarray(missing, dtype=bool)).astype(np.float64)
    n_obs = obs.sum()
    if n_obs == 0:
        raise AllMasked("every label entry is missing")
    diff = T.sub(values, np.where(obs > 0, labels, 0.0))
    return T.mul(T.sum_all(T.mul(T.square(diff), obs)), 1.0 / n_obs)


def rmse(values, labels, missing=None) -> float:
    v = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=np.float64))
    return math.sqrt(mse(v, labels, missing).item())


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def cosine_lr(t: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _project(p: np.ndarray, grad: np.ndarray, update: np.ndarray, delta: float, eps: float) -> np.ndarray:
    """Drop the radial component of ``update`` when ``p`` looks scale-invariant.

    Two views are tried, per output column (channel) then the whole matrix
    (layer); the first view whose |cos(grad, p)| stays below delta/sqrt(dim)
    for every slice is used.
    """
    for axis, dim in ((0, p.shape[0]), (None, p.size)):
        pn = np.sqrt((p * p).sum(axis=axis, keepdims=True)) + eps
        gn = np.sqrt((grad * grad).sum(axis=axis, keepdims=True)) + eps
        cos = np.abs((p * grad).sum(axis=axis, keepdims=True)) / (pn * gn)
        if np.max(cos) < delta / math.sqrt(dim):
            unit = p / pn
            return update - unit * (unit * update).sum(axis=axis, keepdims=True)
    return update


def optimizer_step(
    params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    delta: float = 0.1,
    project: set[str] | None = None,
) -> None:
    """One Adam step in place; names in ``project`` get the AdamP projection."""
    state.step += 1
    t = state.step
    bc1, bc2 = 1 - beta1**t, 1 - beta2**t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if project and name in project and p.data.ndim == 2:
            update = _project(p.data, g, update, delta, eps)
        p.data = p.data - lr * update


def projected_names(model: Model) -> set[str]:
    """Hidden weight matrices: every ``.W`` except the last head layer."""
    last_head = f"head.{len(model.head.weights) - 1}.W"
    return {n for n, t in model.named_parameters() if n.endswith(".W") and n != last_head and t.data.ndim == 2}


# ---------------------------------------------------------------------------
# splits and metrics
# ---------------------------------------------------------------------------


def split_dataset(n: int, seed: int, ratios=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_valid = int(math.floor(ratios[1] * n + 1e-9))
    return perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC for one task; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTask("task needs at least one positive and one negative label")
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auroc(scores: np.ndarray, labels: np.ndarray, missing: np.ndarray) -> tuple[float, list[float | None]]:
    per_task: list[float | None] = []
    for t in range(labels.shape[1]):
        obs = ~missing[:, t]
        try:
            per_task.append(auroc(scores[obs, t], labels[obs, t]))
        except DegenerateTask:
            log.info("task %d skipped from AUROC average: single class", t)
            per_task.append(None)
    valid = [a for a in per_task if a is not None]
    return (float(np.mean(valid)) if valid else float("nan")), per_task


def macro_rmse(values: np.ndarray, labels: np.ndarray, missing: np.ndarray) -> tuple[float, list[float | None]]:
    per_task: list[float | None] = []
    for t in range(labels.shape[1]):
        obs = ~missing[:, t]
        per_task.append(float(np.sqrt(np.mean((values[obs, t] - labels[obs, t]) ** 2))) if obs.any() else None)
    valid = [a for a in per_task if a is not None]
    return (float(np.mean(valid)) if valid else float("nan")), per_task


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 512
    lr0: float = 1e-3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    optimizer: str = "adamp"
    adamp_delta: float = 0.1
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    class_weights: bool = True
    standardize: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.optimizer not in ("adamp", "adam"):
            raise ValueError("optimizer must be 'adamp' or 'adam'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Normalizer:
    """Per-task z-score for regression targets, fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, labels: np.ndarray, missing: np.ndarray) -> "Normalizer":
        n_tasks = labels.shape[1]
        mean, std = np.zeros(n_tasks), np.ones(n_tasks)
        for t in range(n_tasks):
            obs = labels[~missing[:, t], t]
            if obs.size:
                mean[t] = obs.mean()
                s = obs.std()
                std[t] = s if s > 0 else 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, n_tasks: int) -> "Normalizer":
        return cls(np.zeros(n_tasks), np.ones(n_tasks))

    def encode(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def decode(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def metric_name(task: str) -> str:
    return "auroc" if task == "classification" else "rmse"


def compute_loss(model: Model, pred: Tensor, labels: np.ndarray, missing: np.ndarray, pos_weight=None) -> Tensor:
    if model.cfg.task == "classification":
        return weighted_bce(pred, labels, missing, pos_weight)
    return mse(pred, labels, missing)


def predict_records(model: Model, records: list[MolRecord], batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(records), batch_size):
        out.append(forward(model, collate(records[s : s + batch_size]), training=False).pred.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_tasks))


def evaluate(
    model: Model, records: list[MolRecord], labels: np.ndarray, missing: np.ndarray, norm: Normalizer | None = None
) -> tuple[float, list[float | None]]:
    """Macro metric on original label units."""
    pred = predict_records(model, records)
    if model.cfg.task == "classification":
        return macro_auroc(pred, labels, missing)
    if norm is not None:
        pred = norm.decode(pred)
    return macro_rmse(pred, labels, missing)


@dataclass
class SeedResult:
    seed: int
    model: Model | None
    norm: Normalizer
    history: list[dict]
    metric: float | None
    per_task: list[float | None]
    train_metric: float | None
    valid_metric: float | None
    error: str | None = None

    def to_json(self) -> dict:
        d = {"seed": self.seed, "metric": self.metric, "per_task": self.per_task,
             "train_metric": self.train_metric, "valid_metric": self.valid_metric}  # fmt: skip
        if self.error:
            d["error"] = self.error
        return d


def fit_seed(
    records: list[MolRecord],
    labels: np.ndarray,
    missing: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    indices: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> SeedResult:
    """Train one model from scratch and report final-epoch metrics."""
    train_cfg.validate()
    tr, va, te = indices if indices is not None else split_dataset(len(records), seed, train_cfg.ratios)
    rng = np.random.default_rng(seed)
    model = Model.init(model_cfg, seed=seed)
    params = model.named_parameters()
    project = projected_names(model) if train_cfg.optimizer == "adamp" else None
    state = AdamState()

    y = labels.astype(np.float64)
    if model_cfg.task == "regression" and train_cfg.standardize:
        norm = Normalizer.fit(y[tr], missing[tr])
    else:
        norm = Normalizer.identity(y.shape[1])
    y_fit = norm.encode(y) if model_cfg.task == "regression" else y
    y_fit = np.where(missing, 0.0, y_fit)
    pos_weight = positive_weights(y[tr], missing[tr]) if model_cfg.task == "classification" and train_cfg.class_weights else None

    history = []
    sub = lambda idx: [records[i] for i in idx]  # noqa: E731
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr0)
        temp = temperature_at(epoch, train_cfg.epochs, train_cfg.temperature_start, train_cfg.temperature_end)
        order = tr[rng.permutation(len(tr))]
        losses, weights = [], []
        for s in range(0, len(order), train_cfg.batch_size):
            idx = order[s : s + train_cfg.batch_size]
            if missing[idx].all():
                continue
            batch = collate(sub(idx))
            model.zero_grad()
            with T.Tape():
                out = forward(model, batch, training=True, rng=rng, temperature=temp)
                loss = compute_loss(model, out.pred, y_fit[idx], missing[idx], pos_weight)
                if not np.isfinite(loss.item()):
                    raise NumericFailure(f"seed {seed} epoch {epoch}: non-finite loss {loss.item()}")
                T.backward(loss)
            optimizer_step(params, state, lr, delta=train_cfg.adamp_delta, project=project)
            losses.append(loss.item())
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        valid = evaluate(model, sub(va), y[va], missing[va], norm)[0] if len(va) else float("nan")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "valid_metric": valid})

    metric, per_task = evaluate(model, sub(te), y[te], missing[te], norm) if len(te) else (float("nan"), [])
    train_metric = evaluate(model, sub(tr), y[tr], missing[tr], norm)[0]
    valid_metric = history[-1]["valid_metric"] if history else None
    return SeedResult(seed, model, norm, history, metric, per_task, train_metric, valid_metric)


def train_loop(
    records: list[MolRecord],
    labels: np.ndarray,
    missing: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_name: str = "dataset",
) -> tuple[list[SeedResult], dict]:
    """Train every seed; a seed whose loss goes non-finite is reported and skipped."""
    results = []
    for seed in train_cfg.seeds:
        try:
            results.append(fit_seed(records, labels, missing, model_cfg, train_cfg, seed))
        except NumericFailure as exc:
            log.error("seed %d aborted: %s", seed, exc)
            results.append(SeedResult(seed, None, Normalizer.identity(labels.shape[1]), [], None, [], None, None, str(exc)))
    return results, metrics_report(results, model_cfg, dataset_name)


def metrics_report(results: list[SeedResult], model_cfg: ModelConfig, dataset_name: str) -> dict:
    done = [r.metric for r in results if r.error is None and r.metric is not None]
    return {
        "variant": model_cfg.variant,
        "k": model_cfg.k,
        "dataset": dataset_name,
        "metric_name": metric_name(model_cfg.task),
        "seeds": [r.to_json() for r in results],
        "mean": float(np.mean(done)) if done else None,
        "std": float(np.std(done)) if done else None,
    }


def dumps_metrics(report: dict) -> str:
    return json.dumps(_finite_or_null(report), sort_keys=True, indent=2)


def _finite_or_null(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_null(v) for v in obj]
    return obj


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "valid_metric"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    n_checked: int
    rel_error: float


def gradcheck(
    model: Model,
    records: list[MolRecord],
    labels: np.ndarray,
    missing: np.ndarray | None = None,
    seed: int = 0,
    h: float = 1e-5,
    max_coords: int | None = 16,
    temperature: float = 1.0,
) -> list[GradCheckEntry]:
    """Compare tape gradients with central differences on every parameter tensor.

    Each loss evaluation reuses a fresh generator with the same seed, so noise
    and dropout masks are identical across perturbations. The error per tensor
    is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8) over the
    checked coordinates (all of them, or ``max_coords`` sampled ones).
    """
    labels = np.asarray(labels, dtype=np.float64)
    missing = np.zeros(labels.shape, dtype=bool) if missing is None else missing
    batch = collate(records)

    def loss_value(tape: bool) -> float:
        rng = np.random.default_rng(seed)
        if tape:
            model.zero_grad()
            with T.Tape():
                out = forward(model, batch, training=True, rng=rng, temperature=temperature)
                loss = compute_loss(model, out.pred, labels, missing)
                T.backward(loss)
            return loss.item()
        out = forward(model, batch, training=True, rng=rng, temperature=temperature)
        return compute_loss(model, out.pred, labels, missing).item()

    loss_value(tape=True)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in model.named_parameters()}
    pick = np.random.default_rng(seed + 1)
    report = []
    for name, t in model.named_parameters():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else np.sort(pick.choice(n, max_coords, replace=False))
        num = np.zeros(len(coords))
        for c, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value(tape=False)
            flat[i] = orig - h
            down = loss_value(tape=False)
            flat[i] = orig
            num[c] = (up - down) / (2 * h)
        ana = analytic[name].reshape(-1)[coords]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
        report.append(GradCheckEntry(name, len(coords), float(np.linalg.norm(ana - num) / denom)))
    return report
