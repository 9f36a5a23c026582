"""Classification scores and cross-client summaries."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

METRICS = ("f1", "roc_auc", "balanced_acc")


@dataclass(frozen=True)
class ClientScore:
    dataset: str
    algorithm: str
    seed: int
    client: str
    f1: float
    roc_auc: float
    balanced_acc: float


def _labels(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty input")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, n_classes: Optional[int] = None) -> np.ndarray:
    y_true, y_pred = _labels(y_true, y_pred)
    k = n_classes or int(max(y_true.max(), y_pred.max())) + 1
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def f1_weighted(y_true, y_pred) -> float:
    """Per-class F1 averaged with true-support weights; 0/0 counts as 0."""
    cm = confusion_matrix(y_true, y_pred)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    denom = support + cm.sum(axis=0)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / support.sum())


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over classes present in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def _auc_binary(pos: np.ndarray, neg: np.ndarray) -> float:
    # Mann-Whitney U from mid-ranks; ties count one half
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def roc_auc_ovo(y_true, scores) -> float:
    """ROC AUC, macro one-vs-one over ordered class pairs.

    1-D ``scores`` (or a two-column matrix) is the binary case scored by the
    positive class. For K > 2 every ordered pair (i, j) with samples of both
    classes contributes the AUC of class i against class j using column i.
    """
    y = np.asarray(y_true, dtype=np.int64)
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1 or s.shape[1] == 2:
        pos_score = s if s.ndim == 1 else s[:, 1]
        if len(pos_score) != len(y):
            raise ValueError("scores and labels differ in length")
        pos, neg = pos_score[y == 1], pos_score[y == 0]
        if len(pos) == 0 or len(neg) == 0:
            raise ValueError("ROC AUC needs samples of both classes")
        return _auc_binary(pos, neg)
    if s.shape[0] != len(y):
        raise ValueError("scores and labels differ in length")
    aucs = []
    for i in range(s.shape[1]):
        for j in range(s.shape[1]):
            if i == j:
                continue
            pos, neg = s[y == i, i], s[y == j, i]
            if len(pos) and len(neg):
                aucs.append(_auc_binary(pos, neg))
    if not aucs:
        raise ValueError("ROC AUC needs at least two classes with samples")
    return float(np.mean(aucs))


def score_predictions(y_true, probs: np.ndarray, n_classes: int, **ident) -> ClientScore:
    y_pred = probs.argmax(axis=1)
    try:
        auc = roc_auc_ovo(y_true, probs)
    except ValueError:
        auc = math.nan  # single-class hold-out set
    return ClientScore(f1=f1_weighted(y_true, y_pred), roc_auc=auc,
                       balanced_acc=balanced_accuracy(y_true, y_pred), **ident)


# -- summaries -------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    dataset: str
    algorithm: str
    metric: str
    mean: float
    worst: float
    seed_sd: float


def summarize(scores: Sequence[ClientScore], order: str = "seed-first") -> List[SummaryRow]:
    """Per (dataset, algorithm, metric): client mean, worst client and seed SD.

    With ``order="seed-first"`` each client's score is first averaged over
    seeds and ``mean``/``worst`` are taken over those averages. With
    ``order="client-first"`` the client mean and worst client are computed
    per seed and then averaged over seeds. ``seed_sd`` is the population SD
    over seeds of the median client score in both cases.
    """
    if order not in ("seed-first", "client-first"):
        raise ValueError(f"unknown summary order {order!r}")
    if not scores:
        raise ValueError("no scores to summarize")
    groups: Dict[tuple, List[ClientScore]] = defaultdict(list)
    for s in scores:
        groups[(s.dataset, s.algorithm)].append(s)
    rows = []
    for (dataset, algorithm), group in groups.items():
        for metric in METRICS:
            per_client = defaultdict(list)
            per_seed = defaultdict(list)
            for s in group:
                per_client[s.client].append(getattr(s, metric))
                per_seed[s.seed].append(getattr(s, metric))
            seed_medians = np.array([_nan_or(np.nanmedian, np.array(v)) for v in per_seed.values()])
            if order == "seed-first":
                client_means = np.array([_nan_or(np.nanmean, np.array(v)) for v in per_client.values()])
                mean, worst = _nan_or(np.nanmean, client_means), _nan_or(np.nanmin, client_means)
            else:
                means = np.array([_nan_or(np.nanmean, np.array(v)) for v in per_seed.values()])
                worsts = np.array([_nan_or(np.nanmin, np.array(v)) for v in per_seed.values()])
                mean, worst = _nan_or(np.nanmean, means), _nan_or(np.nanmean, worsts)
            rows.append(SummaryRow(dataset, algorithm, metric, mean=mean, worst=worst,
                                   seed_sd=_nan_or(np.nanstd, seed_medians)))
    return rows


def _nan_or(fn, arr: np.ndarray) -> float:
    return float(fn(arr)) if np.any(~np.isnan(arr)) else math.nan


# -- csv -------------------------------------------------------------------

SCORE_COLUMNS = ("dataset", "algorithm", "seed", "client", "f1", "roc_auc", "balanced_acc")
SUMMARY_COLUMNS = tuple(f.name for f in fields(SummaryRow))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_scores(scores: Iterable[ClientScore], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for s in scores:
            w.writerow([_fmt(getattr(s, c)) for c in SCORE_COLUMNS])


def read_scores(path: Union[str, Path]) -> List[ClientScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [ClientScore(r["dataset"], r["algorithm"], int(r["seed"]), r["client"],
                            float(r["f1"]), float(r["roc_auc"]), float(r["balanced_acc"]))
                for r in reader]


def write_summary(rows: Iterable[SummaryRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
