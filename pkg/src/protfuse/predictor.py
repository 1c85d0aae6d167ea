"""Downstream GO-term prediction on top of the condition encoder.

A two-layer MLP reads the encoder's per-protein embedding and emits one
sigmoid probability per term.  Fine-tuning minimises the mean Bernoulli
negative log-likelihood and updates the classifier and the encoder together;
the intrinsic features feeding the encoder stay fixed.

Scores are made consistent with the hierarchy by max-propagation from
descendants to ancestors before evaluation.  :func:`fmax` is the
protein-centric CAFA measure on a 0.01 threshold grid and :func:`aupr` is
the micro-averaged step-wise area under the precision-recall curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataFault, NumericFault
from .hetgraph import GoDag
from .moe import moe_encode
from .numerics import LrSchedule, OptimState, Tape, ad, adamw_update, onecycle_rate

__all__ = [
    "FinetuneConfig", "FinetuneState", "init_classifier", "classifier_probs", "bce_loss",
    "init_finetune", "finetune_step", "finetune", "predict", "true_path_propagate",
    "check_true_path", "fmax", "aupr", "THRESHOLDS", "write_predictions", "write_metrics",
    "read_metrics",
]

THRESHOLDS = np.arange(101) / 100.0


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 1e-4
    hidden: int = 128
    clamp: float = 1e-7
    train_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 3 or self.batch_size < 1 or self.hidden < 1:
            raise ContractViolation("fine-tuning needs >= 3 steps and positive batch and hidden sizes")
        if self.lr <= 0 or self.weight_decay < 0 or not 0.0 < self.warmup_frac < 1.0:
            raise ContractViolation("invalid learning-rate settings")
        if not 0.0 <= self.clamp < 0.5:
            raise ContractViolation("probability clamp must lie in [0, 0.5)")


# ------------------------------------------------------------------ classifier

def init_classifier(d_h, n_terms, hidden=128, rng=None) -> dict:
    rng = np.random.default_rng(rng)
    return {
        "clf.w1": ad.param(rng.normal(size=(d_h, hidden)) * np.sqrt(2.0 / d_h), "clf.w1"),
        "clf.b1": ad.param(np.zeros(hidden), "clf.b1"),
        "clf.w2": ad.param(rng.normal(size=(hidden, n_terms)) / np.sqrt(hidden), "clf.w2"),
        "clf.b2": ad.param(np.zeros(n_terms), "clf.b2"),
    }


def classifier_probs(params, h):
    """Per-term probabilities for each row of the encoder output ``h``."""
    hidden = ad.relu(ad.matmul(h, params["clf.w1"]) + params["clf.b1"])
    return ad.sigmoid(ad.matmul(hidden, params["clf.w2"]) + params["clf.b2"])


def bce_loss(probs, labels, clamp=1e-7):
    """Mean Bernoulli NLL over every (protein, term) entry.

    With ``clamp=0`` a probability of exactly 0 or 1 is a numeric fault.
    """
    p = ad.const(probs)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractViolation(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    if clamp == 0 and np.any((p.value <= 0.0) | (p.value >= 1.0)):
        raise NumericFault("binary cross-entropy: probability 0 or 1 without clamping")
    return ad.binary_cross_entropy(p, y, clamp=clamp if clamp > 0 else np.finfo(float).tiny)


def _forward(params, intrinsic):
    return classifier_probs(params, moe_encode(params, intrinsic))


def predict(params, intrinsic) -> np.ndarray:
    """Raw (unpropagated) probabilities, proteins x terms."""
    return np.asarray(_forward(params, np.atleast_2d(intrinsic)).value)


# ------------------------------------------------------------------ fine-tuning

@dataclass
class FinetuneState:
    params: dict
    optim: OptimState
    schedule: LrSchedule
    rng: np.random.Generator
    step: int = 0


def _trainable(params, config):
    return {k: v for k, v in params.items()
            if k.startswith("clf.") or (config.train_encoder and k.startswith("moe."))}


def init_finetune(params, config: FinetuneConfig) -> FinetuneState:
    return FinetuneState(
        params=params,
        optim=OptimState(lr=config.lr, weight_decay=config.weight_decay),
        schedule=LrSchedule(config.lr, config.warmup_frac, config.steps),
        rng=np.random.default_rng(config.seed),
    )


def finetune_step(state: FinetuneState, intrinsic, labels, config: FinetuneConfig) -> float:
    """One AdamW step on a batch; ``intrinsic`` and ``labels`` are the batch rows."""
    if state.step >= config.steps:
        raise ContractViolation("fine-tuning schedule exhausted")
    train = _trainable(state.params, config)
    with Tape() as tape:
        loss = bce_loss(_forward(state.params, intrinsic), labels, config.clamp)
        for p in state.params.values():
            p.zero_grad()
        tape.backward(loss)
    if not np.isfinite(loss.value):
        raise NumericFault(f"fine-tuning step {state.step + 1}: non-finite loss")
    rate = onecycle_rate(state.schedule, state.step)
    adamw_update(train, {k: p.grad for k, p in train.items()}, state.optim, lr=rate)
    state.step += 1
    return float(loss.value)


def finetune(params, intrinsic, labels, config: FinetuneConfig):
    """Run the full schedule over shuffled mini-batches; returns state and per-step losses."""
    x = np.asarray(intrinsic, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ContractViolation("fine-tuning needs matching, non-empty feature and label rows")
    state = init_finetune(params, config)
    losses = []
    order = np.empty(0, dtype=np.int64)
    while state.step < config.steps:
        if order.size < config.batch_size:
            order = np.r_[order, state.rng.permutation(x.shape[0])]
        idx, order = order[:config.batch_size], order[config.batch_size:]
        losses.append(finetune_step(state, x[idx], y[idx], config))
    return state, losses


# ------------------------------------------------------------------ hierarchy

def _as_dag(dag, n_terms) -> GoDag:
    if isinstance(dag, GoDag):
        if dag.n_terms != n_terms:
            raise ContractViolation(f"hierarchy has {dag.n_terms} terms, scores have {n_terms}")
        return dag
    return GoDag(n_terms, dag)


def true_path_propagate(preds, dag) -> np.ndarray:
    """Raise every term's score to the maximum over its descendants.

    ``dag`` is a :class:`GoDag` or a list of ``(parent, child)`` pairs.  One
    sweep in reverse topological order suffices because every child is
    final before its parents are visited.
    """
    s = np.array(preds, dtype=np.float64, copy=True)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s)
    dag = _as_dag(dag, s.shape[1])
    for t in reversed(dag.order):
        for c in dag.children[t]:
            np.maximum(s[:, t], s[:, c], out=s[:, t])
    return s[0] if squeeze else s


def check_true_path(labels, dag) -> None:
    """Raise :class:`DataFault` if a positive label lacks a positive ancestor."""
    y = np.atleast_2d(np.asarray(labels))
    dag = _as_dag(dag, y.shape[1])
    for c in range(dag.n_terms):
        for p in dag.parents[c]:
            bad = np.flatnonzero((y[:, c] != 0) & (y[:, p] == 0))
            if bad.size:
                raise DataFault(f"protein row {bad[0]} has term {c} but not its parent {p}")


# ------------------------------------------------------------------ metrics

def _check_pair(preds, labels):
    s = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise ContractViolation(f"score matrix {s.shape} and label matrix {y.shape} must be equal 2-D shapes")
    return s, (y != 0)


def fmax(preds, labels) -> tuple[float, float]:
    """Protein-centric maximum F-measure and the lowest threshold attaining it.

    At threshold ``tau`` a term is predicted when its score is ``>= tau``
    and strictly positive.  Precision averages over proteins with at least
    one prediction, recall over proteins with at least one true label.
    Thresholds where no protein has a prediction are skipped.
    """
    s, y = _check_pair(preds, labels)
    labelled = y.any(axis=1)
    if not labelled.any():
        raise ContractViolation("Fmax needs at least one protein with a true label")
    n_true = y.sum(axis=1)
    best, best_t = 0.0, 0.0
    for tau in THRESHOLDS:
        pred = (s >= tau) & (s > 0.0)
        n_pred = pred.sum(axis=1)
        covered = n_pred > 0
        if not covered.any():
            continue
        hits = (pred & y).sum(axis=1)
        precision = float(np.mean(hits[covered] / n_pred[covered]))
        recall = float(np.mean(hits[labelled] / n_true[labelled]))
        f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if f > best:
            best, best_t = f, float(tau)
    return best, best_t


def aupr(preds, labels) -> float:
    """Micro-averaged area under the step-wise precision-recall curve.

    Pairs with equal scores enter the curve together, so the value does
    not depend on how ties are ordered.
    """
    s, y = _check_pair(preds, labels)
    s, y = s.ravel(), y.ravel()
    total = int(y.sum())
    if total == 0:
        raise ContractViolation("AUPR needs at least one positive pair")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]   # end of each tie group
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    recall = tp / total
    precision = tp / (tp + fp)
    steps = np.diff(np.r_[0.0, recall]) * precision
    return float(np.cumsum(steps)[-1])


# ------------------------------------------------------------------ files

def write_predictions(path, preds, protein_ids, term_ids, min_score=0.0) -> Path:
    """TSV ``protein_id<TAB>go_id<TAB>score``, one line per pair with score > ``min_score``."""
    s = np.asarray(preds, dtype=np.float64)
    if s.shape != (len(protein_ids), len(term_ids)):
        raise ContractViolation("prediction matrix does not match the id lists")
    path = Path(path)
    with open(path, "w") as fh:
        for i, pid in enumerate(protein_ids):
            for j, tid in enumerate(term_ids):
                if s[i, j] > min_score:
                    fh.write(f"{pid}\t{tid}\t{s[i, j]:.17g}\n")
    return path


def write_metrics(path, rows) -> Path:
    """CSV ``metric,value,seed`` from ``(metric, value, seed)`` tuples."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "seed"])
        for metric, value, seed in rows:
            w.writerow([metric, repr(float(value)), int(seed)])
    return path


def read_metrics(path) -> list[tuple[str, float, int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value", "seed"]:
        raise DataFault(f"{path}: not a metrics CSV")
    return [(m, float(v), int(s)) for m, v, s in rows[1:]]
