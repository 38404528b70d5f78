"""Evaluation metrics and list-level diagnostics.

AUC uses the rank (Mann-Whitney) formulation with ties counted as half wins.
SeqRMSE and SeqCorr compare predicted and realized list totals.  The
diagnostics expose what the sequence models latch onto: mean first-layer
attention maps and the click correlation matrix across positions.
"""

from __future__ import annotations

import numpy as np


class MetricUndefinedError(ValueError):
    """The metric is undefined for the given inputs (e.g. one-class labels)."""


def compute_auc(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative label")
    ranks = _average_ranks(predictions)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group average."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def compute_seq_rmse(totals_pred: np.ndarray, totals_true: np.ndarray) -> float:
    p = np.asarray(totals_pred, dtype=np.float64)
    t = np.asarray(totals_true, dtype=np.float64)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def compute_seq_corr(totals_pred: np.ndarray, totals_true: np.ndarray) -> float:
    p = np.asarray(totals_pred, dtype=np.float64)
    t = np.asarray(totals_true, dtype=np.float64)
    if p.size < 2:
        raise MetricUndefinedError("correlation needs at least two records")
    if p.std() == 0.0 or t.std() == 0.0:
        raise MetricUndefinedError("correlation undefined under zero variance")
    return float(np.corrcoef(p, t)[0, 1])


def click_correlation_matrix(clicks: np.ndarray) -> np.ndarray:
    """Pearson correlation of clicks between every pair of positions over
    equal-length lists (n, K) -> (K, K)."""
    clicks = np.asarray(clicks, dtype=np.float64)
    if clicks.ndim != 2 or clicks.shape[0] < 2:
        raise MetricUndefinedError("need at least 2 lists of equal length")
    return np.corrcoef(clicks.T)


def attention_heatmap(model, user_feats: np.ndarray, item_feats: np.ndarray,
                      batch_size: int = 512) -> np.ndarray:
    """Mean first-layer attention weights (K, K), averaged over heads and over
    a batch of equal-K lists.  Rows sum to one."""
    from . import autodiff as ad
    from .evaluators import assemble_inputs

    if model.kind != "transformer":
        raise ValueError("attention heatmaps require a transformer evaluator")
    n, k, _ = item_feats.shape
    acc = np.zeros((k, k))
    count = 0
    for lo in range(0, n, batch_size):
        x = assemble_inputs(user_feats[lo : lo + batch_size], item_feats[lo : lo + batch_size], model.pos_table)
        collected: list = []
        graph = ad.Graph()
        model.forward(graph, x, collect_attention=collected)
        for head_weights in collected:  # each (B, K, K)
            acc += head_weights.sum(axis=0)
            count += head_weights.shape[0]
    return acc / count
