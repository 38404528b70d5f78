"""List generators: priority-score models, decoding policies, best-of-n.

A generator scores the remaining candidates at every decode step and a policy
turns scores into the next pick:

* greedy       — argmax, ties broken by lowest candidate index;
* sampling     — softmax(q / tau) over the remaining candidates, n lists in
                 parallel from pre-drawn per-sample uniforms, so a run with a
                 larger n is an exact superset of a smaller one on the same
                 seed;
* beam         — keeps `width` prefixes by cumulative priority score.

Three scorer architectures: mlp (prefix-blind), grnn (a GRU over the chosen
prefix), and settoseq (grnn plus an order-invariant sum encoding of the whole
candidate pool).  Decode paths run on plain numpy; trainers rebuild the same
computation on the autodiff tape for the chosen actions only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .data import FEATURE_DIM, ITEM_DIM, POS_DIM, USER_DIM, RecList
from .simulator import rng_for

GENERATOR_KINDS = ("mlp", "grnn", "settoseq")


@dataclass(frozen=True)
class Policy:
    kind: str  # greedy | sampling | beam
    temperature: float = 1.0
    n: int = 1
    width: int = 4

    def __post_init__(self):
        if self.kind not in ("greedy", "sampling", "beam"):
            raise ValueError(f"unknown policy kind: {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n < 1 or self.width < 1:
            raise ValueError("n and width must be positive")


@dataclass(frozen=True)
class DecodeState:
    """Snapshot of one decode step: the user, the pool, and the chosen
    prefix (0-based positions into the pool)."""

    user_id: int
    pool_ids: tuple[int, ...]
    prefix: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.prefix)) != len(self.prefix):
            raise ValueError("prefix positions must be distinct")

    @property
    def step(self) -> int:
        return len(self.prefix) + 1

    @property
    def remaining(self) -> tuple[int, ...]:
        chosen = set(self.prefix)
        return tuple(i for i in range(len(self.pool_ids)) if i not in chosen)


class GeneratorModel:
    """Priority-score network; `head` is sigmoid for immediate-feedback
    training and linear for long-horizon value learning."""

    POOL_DIM = 32

    def __init__(self, kind: str, params: dict, pos_table: np.ndarray,
                 hidden: int = 64, head: str = "sigmoid"):
        if kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind: {kind!r}")
        if head not in ("sigmoid", "linear"):
            raise ValueError(f"unknown head: {head!r}")
        self.kind = kind
        self.params = params
        self.pos_table = np.asarray(pos_table, dtype=np.float64)
        self.hidden = hidden
        self.head = head

    @property
    def k_max(self) -> int:
        return self.pos_table.shape[0]

    @property
    def head_activation(self):
        return "sigmoid" if self.head == "sigmoid" else None

    @classmethod
    def create(cls, kind: str, pos_table: np.ndarray, seed: int,
               hidden: int = 64, head: str = "sigmoid") -> "GeneratorModel":
        rng = rng_for(seed, 102)
        d = FEATURE_DIM
        p: dict[str, np.ndarray] = {}
        if kind == "mlp":
            p.update(layers.init_mlp(rng, "head", [d, 64, 32, 1]))
        elif kind == "grnn":
            p.update(layers.init_gru(rng, "gru", d, hidden))
            p.update(layers.init_mlp(rng, "head", [hidden + d, 64, 1]))
        elif kind == "settoseq":
            p.update(layers.init_dense(rng, "enc", ITEM_DIM, cls.POOL_DIM))
            p.update(layers.init_gru(rng, "gru", d, hidden))
            p.update(layers.init_mlp(rng, "head", [hidden + cls.POOL_DIM + d, 64, 1]))
        else:
            raise ValueError(f"unknown generator kind: {kind!r}")
        return cls(kind, p, pos_table, hidden, head)

    @property
    def head_layers(self) -> int:
        return 3 if self.kind == "mlp" else 2

    # -- numpy scoring (decode paths, no gradients) ---------------------------

    def candidate_features(self, user_feats: np.ndarray, pool_feats: np.ndarray,
                           step: int) -> np.ndarray:
        """(N, 64) per-candidate inputs at a 1-based step."""
        n = pool_feats.shape[0]
        x = np.empty((n, FEATURE_DIM))
        x[:, :USER_DIM] = user_feats
        x[:, USER_DIM:USER_DIM + ITEM_DIM] = pool_feats
        x[:, USER_DIM + ITEM_DIM:] = self.pos_table[step - 1]
        return x

    def pool_vector(self, pool_feats: np.ndarray, params: dict | None = None) -> np.ndarray | None:
        """Order-invariant pool summary (sum of per-item encodings)."""
        if self.kind != "settoseq":
            return None
        p = params or self.params
        return layers.dense_np(p, "enc", pool_feats, "tanh").sum(axis=0)

    def initial_hidden(self, n_rows: int) -> np.ndarray:
        return np.zeros((n_rows, self.hidden))

    def score_candidates(self, cand_feats: np.ndarray, h: np.ndarray,
                         pooled: np.ndarray | None,
                         params: dict | None = None) -> np.ndarray:
        """(S, N) scores for S parallel decodes over N candidates."""
        p = params or self.params
        s = h.shape[0]
        n = cand_feats.shape[0]
        if self.kind == "mlp":
            q = layers.mlp_np(p, "head", cand_feats, 3, self.head_activation)
            return np.broadcast_to(q[:, 0], (s, n))
        parts = [np.broadcast_to(h[:, None, :], (s, n, self.hidden))]
        if self.kind == "settoseq":
            parts.append(np.broadcast_to(pooled, (s, n, self.POOL_DIM)))
        parts.append(np.broadcast_to(cand_feats, (s, n, FEATURE_DIM)))
        x = np.concatenate(parts, axis=-1)
        return layers.mlp_np(p, "head", x, 2, self.head_activation)[:, :, 0]

    def advance_hidden(self, chosen_feats: np.ndarray, h: np.ndarray,
                       params: dict | None = None) -> np.ndarray:
        if self.kind == "mlp":
            return h
        return layers.gru_step_np(params or self.params, "gru", chosen_feats, h)

    # -- tape scoring for chosen actions (trainers) ---------------------------

    def taped_pool_vector(self, graph: ad.Graph, p: dict, pool_feats: np.ndarray):
        """(B, pool_dim) pool summaries on the tape; pool_feats is (B, N, 32)."""
        enc = layers.dense(p, "enc", graph.constant(pool_feats), "tanh")
        return ad.sumax(enc, axis=1)

    def taped_step_scores(self, graph: ad.Graph, p: dict, x_chosen, h, pooled):
        """Score the chosen action at one step: inputs are (B, 64) chosen-item
        features, (B, hidden) prefix state, optional (B, pool_dim) summary."""
        if self.kind == "mlp":
            return layers.mlp(p, "head", x_chosen, 3, self.head_activation)
        parts = [h]
        if self.kind == "settoseq":
            parts.append(pooled)
        parts.append(x_chosen)
        return layers.mlp(p, "head", ad.concat(parts), 2, self.head_activation)

    def save(self, path) -> None:
        ad.save_params(path, {**self.params, "_pos_table": self.pos_table})

    @classmethod
    def load(cls, path, kind: str, hidden: int = 64, head: str = "sigmoid") -> "GeneratorModel":
        params = ad.load_params(path)
        pos_table = params.pop("_pos_table")
        return cls(kind, params, pos_table, hidden, head)


def priority_scores(gen: GeneratorModel, state: DecodeState,
                    user_feats: np.ndarray, pool_feats: np.ndarray) -> np.ndarray:
    """Scores over the full pool with chosen positions masked to -inf."""
    if not state.remaining:
        raise ValueError("no remaining candidates to score")
    h = gen.initial_hidden(1)
    pooled = gen.pool_vector(pool_feats)
    for step, pos in enumerate(state.prefix, start=1):
        step_feats = gen.candidate_features(user_feats, pool_feats, step)
        h = gen.advance_hidden(step_feats[None, pos, :], h)
    feats = gen.candidate_features(user_feats, pool_feats, state.step)
    scores = gen.score_candidates(feats, h, pooled)[0].copy()
    scores[list(state.prefix)] = -np.inf
    return scores


def sampling_probabilities(gen: GeneratorModel, scores: np.ndarray,
                           mask: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax(q / tau) over remaining candidates; chosen entries get 0."""
    z = np.where(mask, scores / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p[~mask] = 0.0
    return p / p.sum(axis=-1, keepdims=True)


def decode(gen: GeneratorModel, user_feats: np.ndarray, pool_feats: np.ndarray,
           k: int, policy: Policy, seed: int = 0) -> np.ndarray:
    """Decode lists of K distinct picks from an N-candidate pool.

    Returns 0-based pool positions, shape (L, K): L=1 for greedy, L=n for
    sampling (independent lists), L=width for beam (best cumulative score
    first).
    """
    n_pool = pool_feats.shape[0]
    if n_pool < k:
        raise ValueError(f"need N >= K, got N={n_pool} K={k}")
    if k > gen.k_max:
        raise ValueError(f"list length {k} exceeds K_max {gen.k_max}")
    if policy.kind == "beam":
        return _decode_beam(gen, user_feats, pool_feats, k, policy.width)
    s = policy.n if policy.kind == "sampling" else 1
    uniforms = None
    if policy.kind == "sampling":
        uniforms = rng_for(seed).random((s, k))
    pooled = gen.pool_vector(pool_feats)
    h = gen.initial_hidden(s)
    mask = np.ones((s, n_pool), dtype=bool)
    rows = np.arange(s)
    out = np.empty((s, k), dtype=np.int64)
    for j in range(1, k + 1):
        feats = gen.candidate_features(user_feats, pool_feats, j)
        scores = gen.score_candidates(feats, h, pooled)
        if policy.kind == "greedy":
            pick = np.argmax(np.where(mask, scores, -np.inf), axis=1)
        else:
            p = sampling_probabilities(gen, scores, mask, policy.temperature)
            cum = p.cumsum(axis=1)
            pick = np.minimum(
                (cum < uniforms[:, j - 1 : j]).sum(axis=1), n_pool - 1
            )
            # guard against landing on an exhausted entry through float round-off
            bad = ~mask[rows, pick]
            if np.any(bad):
                pick[bad] = np.argmax(
                    np.where(mask[bad], p[bad], -1.0), axis=1
                )
        out[:, j - 1] = pick
        mask[rows, pick] = False
        h = gen.advance_hidden(feats[pick], h)
    return out


def _decode_beam(gen: GeneratorModel, user_feats, pool_feats, k: int, width: int) -> np.ndarray:
    n_pool = pool_feats.shape[0]
    pooled = gen.pool_vector(pool_feats)
    beams = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    h = gen.initial_hidden(1)
    mask = np.ones((1, n_pool), dtype=bool)
    for j in range(1, k + 1):
        feats = gen.candidate_features(user_feats, pool_feats, j)
        q = gen.score_candidates(feats, h, pooled)
        total = np.where(mask, scores[:, None] + q, -np.inf)
        flat = total.ravel()
        take = min(width, int(mask.sum()))
        # stable top-k: ties resolve to the lowest (beam, candidate) pair
        top = np.argsort(-flat, kind="stable")[:take]
        parent, cand = np.divmod(top, n_pool)
        beams = np.concatenate([beams[parent], cand[:, None]], axis=1)
        scores = flat[top]
        mask = mask[parent].copy()
        mask[np.arange(take), cand] = False
        h = gen.advance_hidden(feats[cand], h[parent])
    return beams


def generate_best_of_n(gen: GeneratorModel, evaluator, user_feats: np.ndarray,
                       pool_feats: np.ndarray, k: int, n: int, temperature: float,
                       seed: int = 0):
    """Sample n lists and keep the one the evaluator scores highest.

    Returns (best 0-based positions (K,), all sampled positions (n, K),
    evaluator totals (n,)).  With n=1 the evaluator is never called.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lists = decode(gen, user_feats, pool_feats, k,
                   Policy("sampling", temperature=temperature, n=n), seed=seed)
    if n == 1:
        return lists[0], lists, None
    totals = evaluator_totals(evaluator, user_feats, pool_feats, lists)
    best = int(np.argmax(totals))
    return lists[best], lists, totals


def evaluator_totals(evaluator, user_feats: np.ndarray, pool_feats: np.ndarray,
                     lists: np.ndarray) -> np.ndarray:
    """Total predicted utility of each candidate list (rows of pool positions)."""
    n = lists.shape[0]
    uf = np.broadcast_to(user_feats, (n, USER_DIM))
    itf = pool_feats[lists]
    return evaluator.predict(uf, itf).sum(axis=1)


def as_reclist(positions) -> RecList:
    """0-based pool positions -> 1-based RecList indices."""
    return RecList([int(p) + 1 for p in positions])


# ---------------------------------------------------------------------------
# Supervised trainer: fit priority scores to the logged immediate feedback
# ---------------------------------------------------------------------------

@dataclass
class GenTrainConfig:
    epochs: int = 20
    batch_size: int = 768
    learning_rate: float = 1e-3
    seed: int = 0


def train_generator_sl(
    gen: GeneratorModel,
    groups: dict,
    user_features: np.ndarray,
    item_features: np.ndarray,
    cfg: GenTrainConfig,
) -> list[float]:
    """Fit q(state, logged action) to the logged per-position click with
    squared error, teacher-forcing the logged prefix."""
    if not groups or all(g[0].shape[0] == 0 for g in groups.values()):
        raise ValueError("training dataset is empty")
    from .evaluators import _batches, assemble_inputs

    state = ad.AdamState(learning_rate=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        rng = rng_for(cfg.seed, 13, epoch)
        total, weight = 0.0, 0
        for k, rows in _batches(groups, cfg.batch_size, rng):
            users, items, clicks = groups[k][:3]
            pools = groups[k][3] if len(groups[k]) > 3 else None
            uf = user_features[users[rows]]
            x = assemble_inputs(uf, item_features[items[rows]], gen.pos_table)
            y = clicks[rows].astype(np.float64)
            b = rows.size
            graph = ad.Graph()
            p = graph.parameters(gen.params)
            if gen.kind == "mlp":
                q = ad.reshape(layers.mlp(p, "head", graph.constant(x), 3,
                                          gen.head_activation), (b, k))
            else:
                pooled = None
                if gen.kind == "settoseq":
                    if pools is None:
                        raise ValueError("settoseq training needs the logged pools")
                    pooled = gen.taped_pool_vector(graph, p, item_features[pools[rows]])
                h = graph.constant(np.zeros((b, gen.hidden)))
                qs = []
                for j in range(k):
                    xj = graph.constant(np.ascontiguousarray(x[:, j, :]))
                    qs.append(gen.taped_step_scores(graph, p, xj, h, pooled))
                    h = layers.gru_step(p, "gru", xj, h)
                q = ad.reshape(layers.stack_steps(qs), (b, k))
            diff = q - graph.constant(y)
            loss = ad.sumall(diff * diff) * (1.0 / b)
            grads = graph.backward(loss)
            gen.params, state = ad.adam_step(gen.params, grads, state)
            total += float(loss.values) * b
            weight += b
        curve.append(total / weight)
    return curve
