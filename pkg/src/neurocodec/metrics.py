"""Classification and regression metrics."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata

from .errors import MetricUndefined


def balanced_accuracy(y_true, y_pred, classes=None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    present = np.unique(y_true)
    if classes is not None:
        missing = sorted(set(classes) - set(present.tolist()))
        if missing:
            warnings.warn(f"classes {missing} absent from y_true; excluded from balanced accuracy")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in present]
    return float(np.mean(recalls))


def auroc(y_true, scores) -> float:
    """Probability a positive outscores a negative, ties counted as one half."""
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both classes in y_true")
    ranks = rankdata(scores, method="average")
    u = ranks[y_true].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auc_pr(y_true, scores) -> float:
    """Average precision: step-wise integral of precision over recall."""
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        raise MetricUndefined("AUC-PR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], y_true[order]
    tp = np.cumsum(y)
    # evaluate only at the last index of each tied-score run
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def confusion(y_true, y_pred, labels) -> np.ndarray:
    pos = {c: i for i, c in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        m[pos[t], pos[p]] += 1
    return m


def cohen_kappa(y_true, y_pred) -> float:
    labels = sorted(set(np.asarray(y_true).tolist()) | set(np.asarray(y_pred).tolist()))
    m = confusion(y_true, y_pred, labels)
    n = int(m.sum())
    # integer form of (p_o - p_e) / (1 - p_e), scaled by n^2, so independence gives exactly 0
    agree = n * int(np.trace(m))
    chance = int(np.sum(m.sum(0) * m.sum(1)))
    if chance == n * n:
        if agree == n * n:
            return 1.0
        raise MetricUndefined("kappa undefined when expected agreement is 1")
    return (agree - chance) / (n * n - chance)


def weighted_f1(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    total = 0.0
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(y_true == c)
    return float(total / len(y_true))


def classification_metrics(y_true, y_pred, y_scores=None, classes=None) -> dict[str, float]:
    """Balanced accuracy, kappa and weighted F1; AUROC and AUC-PR for binary tasks with scores."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0 or len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred must be nonempty and equally long")
    out = {"balanced_accuracy": balanced_accuracy(y_true, y_pred, classes),
           "kappa": cohen_kappa(y_true, y_pred),
           "weighted_f1": weighted_f1(y_true, y_pred)}
    if y_scores is not None:
        out["auroc"] = auroc(y_true, y_scores)
        out["auc_pr"] = auc_pr(y_true, y_scores)
    return out


def _per_target(y_true, y_pred):
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape or yt.size == 0:
        raise ValueError("y_true and y_pred must be nonempty with equal shapes")
    if yt.ndim == 1:
        yt, yp = yt[:, None], yp[:, None]
    return yt, yp


def pearson(y_true, y_pred) -> float:
    yt, yp = _per_target(y_true, y_pred)
    vals = []
    for a, b in zip(yt.T, yp.T):
        da, db = a - a.mean(), b - b.mean()
        denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
        if denom == 0:
            raise MetricUndefined("pearson undefined for zero-variance input")
        vals.append(np.sum(da * db) / denom)
    return float(np.mean(vals))


def r2_score(y_true, y_pred) -> float:
    yt, yp = _per_target(y_true, y_pred)
    vals = []
    for a, b in zip(yt.T, yp.T):
        ss_tot = np.sum((a - a.mean()) ** 2)
        if ss_tot == 0:
            raise MetricUndefined("r2 undefined for constant y_true")
        vals.append(1.0 - np.sum((a - b) ** 2) / ss_tot)
    return float(np.mean(vals))


def rmse(y_true, y_pred) -> float:
    yt, yp = _per_target(y_true, y_pred)
    return float(np.mean(np.sqrt(np.mean((yt - yp) ** 2, axis=0))))


def regression_metrics(y_true, y_pred) -> dict[str, float]:
    return {"pearson": pearson(y_true, y_pred), "r2": r2_score(y_true, y_pred),
            "rmse": rmse(y_true, y_pred)}


def format_table(metrics: dict[str, float]) -> str:
    width = max(len(k) for k in metrics)
    vals = [f"{float(v):.6f}" for v in metrics.values()]
    vw = max(5, *(len(v) for v in vals))
    lines = [f"{'metric':<{width}}  {'value':>{vw}}", f"{'-' * width}  {'-' * vw}"]
    lines += [f"{k:<{width}}  {v:>{vw}}" for k, v in zip(metrics, vals)]
    return "\n".join(lines)
