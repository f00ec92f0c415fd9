"""Synthetic multi-task families, adapter-feature export and the task-identity probe."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, ProbeError
from .tensor import no_grad
from .trainer import MultiTaskDataset


@dataclass
class SyntheticTaskFamily:
    """Tasks that share Gaussian inputs and differ only in their labelling maps.

    The label of ``x`` for task ``t`` is ``argmax(((1 - conflict) S + conflict M_t) x)``.
    """

    num_tasks: int
    dim: int
    classes: int
    shared_map: np.ndarray
    task_maps: np.ndarray
    conflict: float
    seed: int
    train: MultiTaskDataset
    test: MultiTaskDataset

    def label_map(self, t):
        return (1.0 - self.conflict) * self.shared_map + self.conflict * self.task_maps[t]

    def labels_for(self, x, t):
        return np.argmax(np.asarray(x).reshape(len(x), -1) @ self.label_map(t).T, axis=1)


def gen_conflict_tasks(T, dim, classes, n_train, n_test, conflict, seed, task_maps=None, seq_len=1):
    """Build a :class:`SyntheticTaskFamily`; ``n_train``/``n_test`` are per task.

    With ``seq_len > 1`` each ``dim``-vector is laid out as ``seq_len`` tokens of
    width ``dim // seq_len``.
    """
    if T < 2:
        raise ConfigError(f"need at least 2 tasks, got {T}")
    if dim < 1 or classes < 2 or n_train < 1 or n_test < 0:
        raise ConfigError("dim >= 1, classes >= 2, n_train >= 1 and n_test >= 0 are required")
    if not 0.0 <= conflict <= 1.0:
        raise ConfigError(f"conflict must lie in [0, 1], got {conflict}")
    if dim % seq_len:
        raise ConfigError(f"dim {dim} is not divisible by seq_len {seq_len}")
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((classes, dim))
    M = rng.standard_normal((T, classes, dim))
    if task_maps is not None:
        M = np.asarray(task_maps, dtype=np.float64)
        if M.shape != (T, classes, dim):
            raise ConfigError(f"task_maps must have shape {(T, classes, dim)}, got {M.shape}")

    def split(n):
        xs, ts, ys = [], [], []
        for t in range(T):
            x = rng.standard_normal((n, dim))
            W = (1.0 - conflict) * S + conflict * M[t]
            xs.append(x)
            ts.append(np.full(n, t))
            ys.append(np.argmax(x @ W.T, axis=1))
        x = np.concatenate(xs).reshape(-1, seq_len, dim // seq_len)
        return MultiTaskDataset(x, np.concatenate(ts), np.concatenate(ys))

    train = split(n_train)
    test = split(n_test)
    return SyntheticTaskFamily(T, dim, classes, S, M, float(conflict), seed, train, test)


# ---- adapter features -------------------------------------------------------


@dataclass
class FeatureTable:
    task_ids: np.ndarray
    sample_ids: np.ndarray
    features: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "sample_id"] + [f"f_{j}" for j in range(self.features.shape[1])])
            for t, s, row in zip(self.task_ids, self.sample_ids, self.features):
                w.writerow([int(t), int(s)] + [repr(float(v)) for v in row])


def extract_features(model, dataset, matrix="o", block=-1, include_base=False, chunk=1024):
    """Adapter-branch output of one adapted matrix, mean-pooled over sequence positions.

    By default only the low-rank branch (before it is added to the frozen
    projection) is returned; ``include_base=True`` returns branch + frozen output.
    """
    lin = model.select_adapter(matrix, block)
    rows = []
    lin.capture = True
    try:
        with no_grad():
            for s in range(0, len(dataset), chunk):
                sl = slice(s, s + chunk)
                model.encode(dataset.x[sl], dataset.task_ids[sl])
                out = lin.last_output if include_base else lin.last_branch
                rows.append(out.mean(axis=1))
    finally:
        lin.capture = False
        lin.last_branch = lin.last_output = None
    return FeatureTable(dataset.task_ids.copy(), np.arange(len(dataset)), np.concatenate(rows))


# ---- linear probe -----------------------------------------------------------


@dataclass
class ProbeReport:
    per_task_f1: list
    macro_f1: float
    n_train: int
    n_test: int
    per_seed_macro_f1: list

    def to_json(self, path=None):
        payload = {
            "per_task_f1": [float(v) for v in self.per_task_f1],
            "macro_f1": float(self.macro_f1),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "per_seed_macro_f1": [float(v) for v in self.per_seed_macro_f1],
        }
        text = json.dumps(payload, indent=2) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _fit_binary_logistic(X, y, C):
    """L2-regularised logistic regression: ``0.5 |w|^2 + C sum log(1 + exp(-y f))``."""
    n, p = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])

    def obj(theta):
        margin = y * (Xb @ theta)
        loss = np.logaddexp(0.0, -margin).sum()
        sig = np.exp(-np.logaddexp(0.0, margin))  # sigmoid(-margin)
        grad = -(Xb.T @ (y * sig))
        w = theta.copy()
        w[-1] = 0.0  # bias unregularised
        return 0.5 * w @ w + C * loss, w + C * grad

    res = minimize(obj, np.zeros(p + 1), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x


def _f1_scores(y_true, y_pred, labels):
    out = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        out.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return np.array(out)


def linear_probe(features, task_labels, split_seed=0, n_splits=5, train_fraction=0.4, C=1.0):
    """One-vs-rest linear classifier predicting task identity from features.

    Each split holds out ``1 - train_fraction`` of the samples (stratified per
    task); features are standardised with train statistics. Per-task F1 and
    macro-F1 are averaged over ``n_splits`` consecutive split seeds starting at
    ``split_seed``.
    """
    X = np.asarray(getattr(features, "features", features), dtype=np.float64)
    y = np.asarray(task_labels, dtype=np.int64)
    labels = np.unique(y)
    if len(labels) < 2:
        raise ProbeError("linear probe needs at least two tasks")
    per_task, macro, n_tr, n_te = [], [], 0, 0
    for s in range(split_seed, split_seed + n_splits):
        rng = np.random.default_rng(s)
        tr, te = [], []
        for c in labels:
            idx = rng.permutation(np.flatnonzero(y == c))
            k = int(round(train_fraction * len(idx)))
            tr.append(idx[:k])
            te.append(idx[k:])
        tr, te = np.concatenate(tr), np.concatenate(te)
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd[sd == 0] = 1.0
        Xtr, Xte = (X[tr] - mu) / sd, (X[te] - mu) / sd
        scores = np.empty((len(te), len(labels)))
        for j, c in enumerate(labels):
            theta = _fit_binary_logistic(Xtr, np.where(y[tr] == c, 1.0, -1.0), C)
            scores[:, j] = Xte @ theta[:-1] + theta[-1]
        pred = labels[np.argmax(scores, axis=1)]
        f1 = _f1_scores(y[te], pred, labels)
        per_task.append(f1)
        macro.append(float(f1.mean()))
        n_tr, n_te = len(tr), len(te)
    return ProbeReport(
        list(np.mean(per_task, axis=0)), float(np.mean(macro)), n_tr, n_te, macro
    )
