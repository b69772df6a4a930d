"""Linear softmax victim, attack outcome, and detection scoreboard."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import FeatureDataset, PoisonLedger, Space, class_stats, replicate_minorities
from .filters import FilterReport

__all__ = [
    "TrainConfig",
    "LinearHead",
    "TrainingError",
    "train_head",
    "cross_entropy",
    "Outcome",
    "attack_outcome",
    "Confusion",
    "detection_confusion",
    "mcc",
    "TrialInputs",
    "TrialRow",
    "undefended_reference",
    "run_trial",
    "summarize",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 500
    seed: int = 0
    init_scale: float = 0.01


@dataclass(eq=False)
class LinearHead:
    weights: np.ndarray  # C x d
    biases: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: list[float] = field(default_factory=list, repr=False)

    def scores(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T + self.biases

    def predict(self, x) -> np.ndarray:
        # argmax returns the lowest index among ties
        return np.argmax(self.scores(x), axis=1)

    def accuracy(self, ds: FeatureDataset) -> float:
        if len(ds) == 0:
            return float("nan")
        return float(np.mean(self.predict(ds.points) == ds.labels))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(weights, biases, x, y):
    """Mean cross-entropy and its gradients ``(loss, dW, db)``."""
    z = x @ weights.T + biases
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ x, p.sum(axis=0)


def train_head(train: FeatureDataset, cfg: TrainConfig = TrainConfig()) -> LinearHead:
    """Full-batch gradient descent on softmax cross-entropy."""
    C = train.num_classes
    counts = class_stats(train).counts
    if len(train) < C or any(c == 0 for c in counts):
        empty = [i for i, c in enumerate(counts) if c == 0]
        raise TrainingError(f"cannot train head: empty class(es) {empty}")
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, cfg.init_scale, size=(C, train.dim))
    b = np.zeros(C)
    x, y = train.points, train.labels
    history = []
    for _ in range(cfg.epochs):
        loss, gw, gb = cross_entropy(w, b, x, y)
        if not math.isfinite(loss):
            raise TrainingError("non-finite training loss")
        history.append(loss)
        w -= cfg.lr * gw
        b -= cfg.lr * gb
    history.append(cross_entropy(w, b, x, y)[0])
    return LinearHead(w, b, cfg, history)


class Outcome(str, enum.Enum):
    ATTACK_SUCCEEDED = "attack_succeeded"
    DEFENSE_SUCCEEDED = "defense_succeeded"


def attack_outcome(head: LinearHead, target_feature, target_label: int, base_label: int) -> Outcome:
    if target_label == base_label:
        raise ValueError("target and base labels must differ")
    pred = int(head.predict(target_feature)[0])
    return Outcome.ATTACK_SUCCEEDED if pred == base_label else Outcome.DEFENSE_SUCCEEDED


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def detection_confusion(report: FilterReport, ledger: PoisonLedger) -> Confusion:
    """Poisons are the positive class; "removed" is the positive prediction."""
    universe = report.kept_ids | report.removed_ids
    if not ledger.poison_ids <= universe:
        raise ValueError("ledger names ids the filter never saw")
    tp = len(report.removed_ids & ledger.poison_ids)
    fn = len(report.kept_ids & ledger.poison_ids)
    fp = len(report.removed_ids) - tp
    tn = len(report.kept_ids) - fn
    return Confusion(tp, fp, tn, fn)


def mcc(tp: int, fp: int, tn: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


# ---------------------------------------------------------------------------
# one trial


Defense = Callable[[FeatureDataset], FilterReport]


@dataclass
class TrialInputs:
    """Everything a trial needs, already in feature space.

    ``train`` already contains the poisons (labelled ``base_label``) and
    excludes the target; ``test`` is a disjoint clean split.
    """

    train: FeatureDataset
    test: FeatureDataset
    target_feature: np.ndarray
    ledger: PoisonLedger
    trial: int = 0
    seed: int = 0


@dataclass
class TrialRow:
    trial: int
    seed: int
    qualifies: bool
    undefended_outcome: str
    outcome: str
    defense_success: bool
    off_class: bool
    target_pred: int
    poisons_removed: int
    n_poisons: int
    clean_removed: int
    n_clean: int
    clean_removed_fraction: float
    tp: int
    fp: int
    tn: int
    fn: int
    mcc: float
    test_accuracy: float
    undefended_test_accuracy: float
    n_train: int


def _expand_ledger(ds: FeatureDataset, ledger: PoisonLedger) -> PoisonLedger:
    if not ds.provenance:
        return ledger
    poisons = {i for i, src in ds.provenance.items() if src in ledger.poison_ids}
    return PoisonLedger(frozenset(poisons), ledger.target_id, ledger.base_label, ledger.target_label)


def undefended_reference(inputs: TrialInputs, victim: TrainConfig = TrainConfig(), rebalance: bool = False) -> tuple[LinearHead, Outcome]:
    """Head trained on the unfiltered (optionally rebalanced) set and its outcome."""
    train = replicate_minorities(inputs.train) if rebalance else inputs.train
    head = train_head(train, victim)
    return head, attack_outcome(head, inputs.target_feature, inputs.ledger.target_label, inputs.ledger.base_label)


def run_trial(
    inputs: TrialInputs,
    defense: Defense,
    victim: TrainConfig = TrainConfig(),
    rebalance: bool = False,
    undefended: tuple[LinearHead, Outcome] | None = None,
) -> TrialRow:
    """Filter, train, and score one poisoned training set.

    The undefended reference (no filter, same rebalancing) decides whether
    the trial qualifies; pass a precomputed ``(head, outcome)`` to reuse it.
    """
    train, test, ledger = inputs.train, inputs.test, inputs.ledger
    if train.space is not Space.FEATURE:
        raise ValueError("trial expects feature-space data")
    if set(train.ids.tolist()) & set(test.ids.tolist()):
        raise ValueError("test ids overlap training ids")
    if ledger.target_id in set(train.ids.tolist()):
        raise ValueError("target must not be part of the training set")
    if rebalance:
        train = replicate_minorities(train)
    ledger = _expand_ledger(train, ledger)
    lt, lb = ledger.target_label, ledger.base_label

    if undefended is None:
        undefended = undefended_reference(inputs, victim, rebalance)
    head0, base_outcome = undefended

    report = defense(train)
    if not report.partitions(train):
        raise RuntimeError(f"{report.defense_name} did not partition the training ids")
    head = train_head(report.apply(train), victim)
    outcome = attack_outcome(head, inputs.target_feature, lt, lb)
    pred = int(head.predict(inputs.target_feature)[0])
    conf = detection_confusion(report, ledger)
    n_clean = conf.fp + conf.tn
    return TrialRow(
        trial=inputs.trial,
        seed=inputs.seed,
        qualifies=base_outcome is Outcome.ATTACK_SUCCEEDED,
        undefended_outcome=base_outcome.value,
        outcome=outcome.value,
        defense_success=outcome is Outcome.DEFENSE_SUCCEEDED,
        off_class=pred not in (lt, lb),
        target_pred=pred,
        poisons_removed=conf.tp,
        n_poisons=conf.tp + conf.fn,
        clean_removed=conf.fp,
        n_clean=n_clean,
        clean_removed_fraction=conf.fp / n_clean if n_clean else 0.0,
        tp=conf.tp,
        fp=conf.fp,
        tn=conf.tn,
        fn=conf.fn,
        mcc=mcc(conf.tp, conf.fp, conf.tn, conf.fn),
        test_accuracy=head.accuracy(test),
        undefended_test_accuracy=head0.accuracy(test),
        n_train=len(train),
    )


def summarize(rows: Sequence[TrialRow]) -> dict:
    """Scoreboard aggregates over qualifying trials."""
    q = [r for r in rows if r.qualifies]
    out = {
        "trials": len(rows),
        "qualifying_trials": len(q),
        "defense_successes": sum(r.defense_success for r in q),
        "defense_success_rate": (sum(r.defense_success for r in q) / len(q)) if q else None,
        "poisons_removed": sum(r.poisons_removed for r in q),
        "poisons_total": sum(r.n_poisons for r in q),
        "clean_removed": sum(r.clean_removed for r in q),
        "clean_total": sum(r.n_clean for r in q),
        "mean_clean_removed_fraction": float(np.mean([r.clean_removed_fraction for r in q])) if q else None,
        "mean_mcc": float(np.mean([r.mcc for r in q])) if q else None,
        "mean_test_accuracy": float(np.mean([r.test_accuracy for r in q])) if q else None,
        "off_class": sum(r.off_class for r in q),
    }
    return out
