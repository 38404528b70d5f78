"""List evaluators: predict per-position click probabilities and their total.

Four sequence encoders with increasing context:

* mlp          — each position scored from (user, item, position) alone;
* grnn         — a GRU over the preceding items feeds each position's head;
* bigrnn       — forward and reverse GRUs, so every position sees the whole list;
* transformer  — 2-layer multi-head self-attention over the whole list.

Per-position outputs are sigmoids; the list total is their sum.  A kernel
model over clicked subsets (`DppModel`) is included as a diversity-flavored
baseline; it scores lists by log det(K + I) rather than predicting clicks
per position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .data import FEATURE_DIM, ITEM_DIM, POS_DIM, USER_DIM
from .simulator import rng_for

EVALUATOR_KINDS = ("mlp", "grnn", "bigrnn", "transformer")


def assemble_inputs(user_feats: np.ndarray, item_feats: np.ndarray, pos_table: np.ndarray) -> np.ndarray:
    """(B, 24) users + (B, K, 32) items + (K_max, 8) positions -> (B, K, 64)."""
    b, k, _ = item_feats.shape
    x = np.empty((b, k, FEATURE_DIM))
    x[:, :, :USER_DIM] = user_feats[:, None, :]
    x[:, :, USER_DIM:USER_DIM + ITEM_DIM] = item_feats
    x[:, :, USER_DIM + ITEM_DIM:] = pos_table[None, :k, :]
    return x


class EvaluatorModel:
    """One of the four sequence evaluators plus its parameters."""

    def __init__(self, kind: str, params: dict, pos_table: np.ndarray, hidden: int = 64):
        if kind not in EVALUATOR_KINDS:
            raise ValueError(f"unknown evaluator kind: {kind!r}")
        self.kind = kind
        self.params = params
        self.pos_table = np.asarray(pos_table, dtype=np.float64)
        self.hidden = hidden

    @property
    def k_max(self) -> int:
        return self.pos_table.shape[0]

    @classmethod
    def create(cls, kind: str, pos_table: np.ndarray, seed: int, hidden: int = 64) -> "EvaluatorModel":
        rng = rng_for(seed, 101)
        d = FEATURE_DIM
        p: dict[str, np.ndarray] = {}
        if kind == "mlp":
            p.update(layers.init_mlp(rng, "head", [d, 64, 32, 1]))
        elif kind == "grnn":
            p.update(layers.init_gru(rng, "gru", d, hidden))
            p.update(layers.init_mlp(rng, "head", [hidden + d, 64, 1]))
        elif kind == "bigrnn":
            p.update(layers.init_gru(rng, "fwd", d, hidden))
            p.update(layers.init_gru(rng, "bwd", d, hidden))
            p.update(layers.init_mlp(rng, "head", [2 * hidden, 64, 1]))
        elif kind == "transformer":
            p.update(layers.init_attention_encoder(rng, "enc", 2, d, 4, 128))
            p.update(layers.init_mlp(rng, "head", [d, 1]))
        else:
            raise ValueError(f"unknown evaluator kind: {kind!r}")
        return cls(kind, p, pos_table, hidden)

    # -- forward ------------------------------------------------------------

    def forward(self, graph: ad.Graph, x: np.ndarray, collect_attention: list | None = None):
        """Batched scores for equal-length lists: x (B, K, 64) -> (B, K)."""
        b, k, _ = x.shape
        if k > self.k_max:
            raise ValueError(f"list length {k} exceeds K_max {self.k_max}")
        p = graph.parameters(self.params)
        if self.kind == "mlp":
            out = layers.mlp(p, "head", graph.constant(x), 3, "sigmoid")
            return ad.reshape(out, (b, k))
        if self.kind == "grnn":
            h = graph.constant(np.zeros((b, self.hidden)))
            outs = []
            for j in range(k):
                xj = graph.constant(np.ascontiguousarray(x[:, j, :]))
                # the head sees the prefix summary and the current position only
                score = layers.mlp(p, "head", ad.concat([h, xj]), 2, "sigmoid")
                outs.append(score)
                h = layers.gru_step(p, "gru", xj, h)
            return ad.reshape(layers.stack_steps(outs), (b, k))
        if self.kind == "bigrnn":
            xs = [graph.constant(np.ascontiguousarray(x[:, j, :])) for j in range(k)]
            h0 = graph.constant(np.zeros((b, self.hidden)))
            hs_f = layers.run_gru(p, "fwd", xs, h0)
            hs_b = layers.run_gru(p, "bwd", xs[::-1], h0)[::-1]
            outs = [
                layers.mlp(p, "head", ad.concat([hf, hb]), 2, "sigmoid")
                for hf, hb in zip(hs_f, hs_b)
            ]
            return ad.reshape(layers.stack_steps(outs), (b, k))
        # transformer
        enc = layers.attention_encoder(
            p, "enc", graph.constant(x), 2, 4, collect_weights=collect_attention
        )
        out = layers.mlp(p, "head", enc, 1, "sigmoid")
        return ad.reshape(out, (b, k))

    def predict(self, user_feats: np.ndarray, item_feats: np.ndarray) -> np.ndarray:
        """Per-position probabilities for a batch of equal-K lists."""
        if item_feats.shape[1] > self.k_max:
            raise ValueError(
                f"list length {item_feats.shape[1]} exceeds K_max {self.k_max}"
            )
        x = assemble_inputs(user_feats, item_feats, self.pos_table)
        graph = ad.Graph()
        return self.forward(graph, x).values

    def save(self, path) -> None:
        ad.save_params(path, {**self.params, "_pos_table": self.pos_table})

    @classmethod
    def load(cls, path, kind: str, hidden: int = 64) -> "EvaluatorModel":
        params = ad.load_params(path)
        pos_table = params.pop("_pos_table")
        return cls(kind, params, pos_table, hidden)


def eval_forward(model: EvaluatorModel, user_feats: np.ndarray, item_feats: np.ndarray):
    """Score one ordered list: per-position utilities and their total."""
    per_pos = model.predict(
        np.asarray(user_feats, dtype=np.float64)[None, :],
        np.asarray(item_feats, dtype=np.float64)[None, :, :],
    )[0]
    return per_pos, float(per_pos.sum())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 768
    learning_rate: float = 1e-3
    loss_kind: str = "per-position"  # or "overall"
    seed: int = 0


def _batches(groups: dict, batch_size: int, rng: np.random.Generator):
    """Equal-K minibatches in a shuffled global order.

    `groups` maps K -> (user_ids, item_ids, clicks) arrays; rows within a
    group are shuffled, then the assembled batch list is shuffled.
    """
    plan = []
    for k in sorted(groups):
        n = groups[k][0].shape[0]
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            plan.append((k, order[lo : lo + batch_size]))
    rng.shuffle(plan)
    return plan


def train_evaluator(
    model: EvaluatorModel,
    groups: dict,
    user_features: np.ndarray,
    item_features: np.ndarray,
    cfg: TrainConfig,
) -> list[float]:
    """Minimize squared click error by mini-batch Adam; returns the per-epoch
    mean training loss."""
    if not groups or all(g[0].shape[0] == 0 for g in groups.values()):
        raise ValueError("training dataset is empty")
    if cfg.loss_kind not in ("per-position", "overall"):
        raise ValueError(f"unknown loss kind: {cfg.loss_kind!r}")
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        rng = rng_for(cfg.seed, 7, epoch)
        total, weight = 0.0, 0
        for k, rows in _batches(groups, cfg.batch_size, rng):
            users, items, clicks = groups[k][:3]
            uf = user_features[users[rows]]
            itf = item_features[items[rows]]
            x = assemble_inputs(uf, itf, model.pos_table)
            graph = ad.Graph()
            scores = model.forward(graph, x)
            y = graph.constant(clicks[rows].astype(np.float64))
            if cfg.loss_kind == "per-position":
                diff = scores - y
                loss = ad.sumall(diff * diff) * (1.0 / rows.size)
            else:
                diff = ad.sumax(scores, axis=1) - ad.sumax(y, axis=1)
                loss = ad.sumall(diff * diff) * (1.0 / rows.size)
            grads = graph.backward(loss)
            model.params, state = ad.adam_step(model.params, grads, state)
            total += float(loss.values) * rows.size
            weight += rows.size
        curve.append(total / weight)
    return curve


# ---------------------------------------------------------------------------
# Kernel-determinant baseline
# ---------------------------------------------------------------------------

class DppModel:
    """Clicked-subset likelihood model with a similarity-damped rank-one
    kernel: K_ij = alpha * e_i * e_j * exp(-D_ij / (2 sigma^2)) + jitter * I,
    with D the pairwise Jaccard distance between item tag sets.

    alpha is trained through a softplus; sigma stays fixed.  The list-level
    score used for rank correlation is log det(K + I).
    """

    JITTER = 1e-6

    def __init__(self, params: dict, sigma: float = 1.0):
        self.params = params
        self.sigma = sigma

    @classmethod
    def create(cls, seed: int, sigma: float = 1.0) -> "DppModel":
        rng = rng_for(seed, 103)
        p = layers.init_dense(rng, "embed", USER_DIM + ITEM_DIM, 1)
        p["alpha_raw"] = np.asarray(0.0)
        return cls(p, sigma)

    def kernel(self, graph: ad.Graph, user_feats, item_feats, distances):
        """Batched kernel matrices: (B, K, K) for equal-K lists."""
        b, k, _ = item_feats.shape
        ui = np.concatenate(
            [np.broadcast_to(user_feats[:, None, :], (b, k, USER_DIM)), item_feats],
            axis=2,
        )
        p = graph.parameters(self.params)
        e = layers.dense(p, "embed", graph.constant(ui))  # (B, K, 1)
        outer = ad.matmul(e, ad.swap_last(e))  # (B, K, K)
        sim = graph.constant(np.exp(-distances / (2.0 * self.sigma ** 2)))
        alpha = ad.log(ad.exp(p["alpha_raw"]) + 1.0)  # softplus, keeps alpha > 0
        kern = outer * sim * alpha
        eye = graph.constant(np.broadcast_to(np.eye(k) * self.JITTER, (b, k, k)).copy())
        return kern + eye

    def kernel_values(self, user_feats, item_feats, distances) -> np.ndarray:
        graph = ad.Graph()
        return self.kernel(
            graph,
            np.asarray(user_feats, dtype=np.float64),
            np.asarray(item_feats, dtype=np.float64),
            distances,
        ).values

    @staticmethod
    def _neg_mean_loglik(graph: ad.Graph, kern, clicks: np.ndarray):
        """-mean log P(clicked subset); numerator of an empty subset is 1."""
        b, k, _ = kern.values.shape
        eye = graph.constant(np.broadcast_to(np.eye(k), (b, k, k)).copy())
        loss = ad.sumall(ad.logdet_psd(kern + eye))
        counts = clicks.sum(axis=1)
        # group rows by click count so each submatrix gather is rectangular
        for m in np.unique(counts):
            if m == 0:
                continue
            sel = np.where(counts == m)[0]
            idx = np.argsort(1 - clicks[sel], axis=1, kind="stable")[:, :m]
            numer = ad.logdet_psd(ad.gather_sub(kern, idx, rows=sel))
            loss = loss - ad.sumall(numer)
        return loss * (1.0 / b)

    def log_likelihood(self, user_feats, item_feats, distances, clicks: np.ndarray) -> float:
        """Mean log-likelihood of the clicked subsets of a batch of lists."""
        graph = ad.Graph()
        kern = self.kernel(graph, np.asarray(user_feats, dtype=np.float64),
                           np.asarray(item_feats, dtype=np.float64), distances)
        loss = self._neg_mean_loglik(graph, kern, np.asarray(clicks))
        return -float(loss.values)

    def scores(self, user_feats, item_feats, distances) -> np.ndarray:
        """List score log det(K + I), one per list."""
        graph = ad.Graph()
        kern = self.kernel(graph, np.asarray(user_feats, dtype=np.float64),
                           np.asarray(item_feats, dtype=np.float64), distances)
        b, k, _ = kern.values.shape
        eye = graph.constant(np.broadcast_to(np.eye(k), (b, k, k)).copy())
        return ad.logdet_psd(kern + eye).values


def dpp_train(
    model: DppModel,
    groups: dict,
    user_features: np.ndarray,
    item_features: np.ndarray,
    distance_fn,
    cfg: TrainConfig,
) -> list[float]:
    """Ascend the mean clicked-subset log-likelihood by Adam.  Returns the
    per-epoch negative mean log-likelihood (a decreasing curve when learning).
    """
    if not groups or all(g[0].shape[0] == 0 for g in groups.values()):
        raise ValueError("training dataset is empty")
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        rng = rng_for(cfg.seed, 11, epoch)
        total, weight = 0.0, 0
        for k, rows in _batches(groups, cfg.batch_size, rng):
            users, items, clicks = groups[k][:3]
            items_b = items[rows]
            graph = ad.Graph()
            kern = model.kernel(
                graph, user_features[users[rows]], item_features[items_b],
                distance_fn(items_b),
            )
            loss = model._neg_mean_loglik(graph, kern, clicks[rows])
            grads = graph.backward(loss)
            model.params, state = ad.adam_step(model.params, grads, state)
            total += float(loss.values) * rows.size
            weight += rows.size
        curve.append(total / weight)
    return curve
