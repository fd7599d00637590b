"""SGD with momentum, the exponential learning-rate schedule, the three
training phases and k-fold hyperparameter search.
"""
import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .layers import softmax, softmax_cross_entropy, softmax_cross_entropy_backward
from .tensor import ConfigurationError, Parameter

PHASES = ("pretrain_modality", "frozen_fusion", "joint")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05                # initial learning rate
    epochs_per_decay: float = 10.0  # epochs for one decay_factor step
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005    # L2 multiplier
    bn_decay: float = 0.99          # batch-norm moving-average decay
    batch_size: int = 16
    keep_prob: float = 0.5
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.epochs_per_decay <= 0:
            raise ConfigurationError("learning rate, weight decay and epochs_per_decay must be non-negative "
                                     "(epochs_per_decay strictly positive)")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if not 0 < self.bn_decay < 1:
            raise ConfigurationError(f"bn_decay must lie in (0, 1), got {self.bn_decay}")
        if self.batch_size < 2 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 2 and epochs >= 0")


def learning_rate(config: TrainConfig, epoch: float) -> float:
    """Continuous exponential decay ``lr * decay_factor ** (epoch / n)``."""
    return config.lr * config.decay_factor ** (epoch / config.epochs_per_decay)


def staircase_learning_rate(config: TrainConfig, epoch: float) -> float:
    return config.lr * config.decay_factor ** np.floor(epoch / config.epochs_per_decay)


def sgd_momentum_step(params: Sequence[Parameter], state: Dict[str, np.ndarray], config: TrainConfig,
                      lr: float) -> None:
    """One update: ``v <- m v + g + wd w`` then ``w <- w - lr v``.

    Weight decay only touches parameters flagged ``decay`` (conv / FC weights).
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {p.name} ({bad} entries)")
        g = p.grad + config.weight_decay * p.value if p.decay else p.grad
        v = state.get(p.name)
        if v is None:
            v = state[p.name] = np.zeros_like(p.value)
        v *= config.momentum
        v += g
        p.value -= lr * v


@dataclass
class Phase:
    name: str
    trainable: Callable[[object], List[Parameter]] = None

    def __post_init__(self):
        if self.name not in PHASES:
            raise ConfigurationError(f"unknown phase {self.name!r}; expected one of {PHASES}")

    def parameters(self, model) -> List[Parameter]:
        if self.trainable is not None:
            return list(self.trainable(model))
        if self.name == "pretrain_modality":
            return model.trunk_params() + model.tap_params([model.classifier_tap]) + model.classifier_params()
        if self.name == "frozen_fusion":
            return model.tap_params() + model.head_params()
        return model.params()


@dataclass
class TrainingLog:
    """Per-epoch rows plus, per phase, the learning rate reached at the end.

    In the CSV each phase closes with a row at ``epoch == epochs`` whose only
    filled field is ``lr``, so the final rate can be read back from the file.
    """
    rows: List[dict] = field(default_factory=list)
    final_lr: float = float("nan")
    ends: Dict[str, tuple] = field(default_factory=dict)   # phase -> (epochs, final lr)

    def to_csv(self, path, mode="w") -> None:
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(["epoch", "phase", "loss", "train_acc", "val_acc", "lr"])
            for i, r in enumerate(self.rows):
                w.writerow([r["epoch"], r["phase"], repr(r["loss"]), repr(r["train_acc"]),
                            "" if r["val_acc"] is None else repr(r["val_acc"]), repr(r["lr"])])
                last = i + 1 == len(self.rows) or self.rows[i + 1]["phase"] != r["phase"]
                if last and r["phase"] in self.ends:
                    epochs, lr = self.ends[r["phase"]]
                    w.writerow([epochs, r["phase"], "", "", "", repr(lr)])

    def extend(self, other: "TrainingLog") -> None:
        self.rows.extend(other.rows)
        self.ends.update(other.ends)
        self.final_lr = other.final_lr


def read_log_csv(path) -> Dict[str, dict]:
    """``{phase: {"epochs": [...], "lr": [...], "final_lr": float}}`` from a log CSV."""
    out: Dict[str, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            ph = out.setdefault(r["phase"], {"epochs": [], "lr": [], "final_lr": float("nan")})
            if r["loss"] == "":
                ph["final_lr"] = float(r["lr"])
            else:
                ph["epochs"].append(int(r["epoch"]))
                ph["lr"].append(float(r["lr"]))
    return out


def _take(X, idx):
    if isinstance(X, Mapping):
        return {k: _take(v, idx) for k, v in X.items()}
    return X[idx]


def _length(X) -> int:
    if isinstance(X, Mapping):
        return _length(next(iter(X.values())))
    return len(X)


class _ModalityTask:
    def __init__(self, net):
        self.net = net

    def prepare(self, X, training):
        return X

    def forward(self, xb, training):
        return self.net.forward(xb, training, tap_ids=[])[1]

    def backward(self, d):
        self.net.backward(d_logits=d)


class _FusionTask:
    def __init__(self, net, frozen):
        self.net, self.frozen = net, frozen

    def prepare(self, X, training):
        if self.frozen:
            # trunks are fixed for the whole phase: run them once
            return {"maps": self.net.trunk_maps(X, training=False)}
        return X

    def forward(self, xb, training):
        if self.frozen:
            return self.net.forward(None, training, frozen=True, maps=xb["maps"])
        return self.net.forward(xb, training)

    def backward(self, d):
        self.net.backward(d)


def _task(phase: Phase, model):
    if phase.name == "pretrain_modality":
        if getattr(model, "classifier", None) is None:
            raise ConfigurationError("pretrain_modality needs a network with a classifier")
        return _ModalityTask(model)
    return _FusionTask(model, frozen=phase.name == "frozen_fusion")


def predict_logits(model, X, batch_size=256) -> np.ndarray:
    task = _ModalityTask(model) if hasattr(model, "classifier_tap") else _FusionTask(model, False)
    n = _length(X)
    outs = [task.forward(_take(X, slice(i, i + batch_size)), False) for i in range(0, n, batch_size)]
    return np.concatenate(outs, axis=0)


def predict_proba(model, X, batch_size=256) -> np.ndarray:
    return softmax(predict_logits(model, X, batch_size).astype(np.float64))


def run_phase(phase: Phase, model, X, y, config: TrainConfig, X_val=None, y_val=None,
              callback=None) -> TrainingLog:
    """Train ``phase``'s parameters of ``model`` for ``config.epochs`` epochs.

    Mini-batch order comes from ``config.seed`` alone, so identical seeds give
    identical logs.  Parameters outside the phase's trainable set are never
    written.
    """
    params = phase.parameters(model)
    if not params:
        raise ConfigurationError(f"phase {phase.name}: empty trainable set")
    y = np.asarray(y)
    n = _length(X)
    if n == 0:
        raise ConfigurationError(f"phase {phase.name}: empty dataset")
    task = _task(phase, model)
    data = task.prepare(X, True)
    rng = np.random.default_rng(config.seed)
    nb = max(1, n // config.batch_size)
    if n < 2:
        nb = 1
    state: Dict[str, np.ndarray] = {}
    log = TrainingLog()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        epoch_lr = learning_rate(config, epoch)
        for b, idx in enumerate(np.array_split(order, nb)):
            lr = learning_rate(config, epoch + b / nb)
            for p in params:
                p.zero_grad()
            logits = task.forward(_take(data, idx), True)
            loss, probs = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"phase {phase.name}: non-finite loss at epoch {epoch}")
            task.backward(softmax_cross_entropy_backward(probs, y[idx]).astype(logits.dtype))
            sgd_momentum_step(params, state, config, lr)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
        val_acc = None
        if X_val is not None:
            val_acc = float(np.mean(predict_logits(model, X_val).argmax(axis=1) == np.asarray(y_val)))
        row = {"epoch": epoch, "phase": phase.name, "loss": loss_sum / n, "train_acc": correct / n,
               "val_acc": val_acc, "lr": epoch_lr}
        log.rows.append(row)
        if callback is not None:
            callback(row)
    log.final_lr = learning_rate(config, config.epochs)
    log.ends[phase.name] = (config.epochs, log.final_lr)
    return log


def joint_phase_config(config: TrainConfig, final_lrs: Sequence[float], previous_batch: int) -> TrainConfig:
    """Joint fine-tuning starts at the smallest final modality learning rate
    with half the previous batch size."""
    if not len(final_lrs):
        raise ConfigurationError("joint phase needs the modality phases' final learning rates")
    return replace(config, lr=float(min(final_lrs)), batch_size=max(2, previous_batch // 2))


class StratificationError(ValueError):
    pass


def kfold_search(estimator, grid: Sequence[TrainConfig], X, y, k: int = 5, seed: int = 0,
                 param: str = "train_config"):
    """Pick the config with the best mean validation rank-one accuracy.

    ``estimator`` is cloned and ``param`` set to each grid entry.  Folds are
    class-stratified and fixed by ``seed``; ties keep grid order.
    Returns ``(best_config, {grid_index: [fold scores]})``.
    """
    from sklearn.base import clone
    from sklearn.model_selection import StratifiedKFold

    if not grid:
        raise ConfigurationError("empty hyperparameter grid")
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        bad = classes[counts < k]
        raise StratificationError(f"classes {bad.tolist()} have fewer than k={k} samples")
    folds = list(StratifiedKFold(n_splits=k, shuffle=True, random_state=seed).split(np.zeros(len(y)), y))
    scores: Dict[int, List[float]] = {}
    best, best_mean = None, -np.inf
    for gi, cfg in enumerate(grid):
        fold_scores = []
        for tr, va in folds:
            est = clone(estimator).set_params(**{param: cfg})
            est.fit(_take(X, tr), y[tr])
            fold_scores.append(float(np.mean(est.predict(_take(X, va)) == y[va])))
        scores[gi] = fold_scores
        mean = float(np.mean(fold_scores))
        if mean > best_mean:
            best, best_mean = cfg, mean
    return best, scores


def stratified_folds(y, k=5, seed=0):
    from sklearn.model_selection import StratifiedKFold

    return list(StratifiedKFold(n_splits=k, shuffle=True, random_state=seed).split(np.zeros(len(y)), y))
