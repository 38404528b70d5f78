"""Seeded synthetic user-behavior model and log generation.

The ground truth combines four effects that make whole-list context matter:

* position decay: examination shrinks geometrically down the list;
* interweaving: a click at j-1 suppresses examination at j, a click at j-2
  with no click at j-1 boosts it, so adjacent positions are clicked together
  less often than positions two apart;
* category saturation: repeats of a category within a short window lose
  attraction;
* layout patterns: the layout triple ending at a position carries a
  learned-good or learned-bad multiplier.

Clicks are Bernoulli(examination * attraction), with the examination chain
driven by the realized clicks above.  Everything is deterministic given the
seed; feature vectors are noisy projections of the latent factors, so models
have to learn the behavior rather than read it off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Item, LogRecord, PositionTable, User, ITEM_DIM, USER_DIM, POS_DIM

LOGGING_POLICIES = ("uniform-random", "quality-greedy", "eps-mixture")


class SimConfigError(ValueError):
    pass


@dataclass
class BehaviorConfig:
    n_users: int = 20000
    n_items: int = 5000
    n_categories: int = 12
    n_layouts: int = 6
    d_lat: int = 8

    # attraction
    affinity_scale: float = 1.6
    quality_mean: float = -2.4
    quality_std: float = 0.8
    layout_offset_std: float = 0.25

    # examination chain
    position_decay: float = 0.95       # epsilon_0
    serpentine_adjacent: float = 0.7   # multiplier after a click at j-1
    serpentine_skip: float = 1.3       # multiplier after a click at j-2 only

    # category saturation
    saturation_window: int = 3
    saturation_penalty: float = 0.8    # rho, applied once per repeat in window

    # layout 3-gram multipliers
    n_good_patterns: int = 20
    good_pattern_multiplier: float = 1.25
    n_bad_patterns: int = 20
    bad_pattern_multiplier: float = 0.8
    # optional explicit table {"l1,l2,l3": multiplier}; overrides the sampled one
    pattern_table: dict = field(default_factory=dict)

    # list length distribution
    k_support: tuple = (10, 15, 20, 25, 30, 35, 40, 45, 50)
    k_weights: tuple = ()  # empty = uniform

    # feature synthesis: id-key widths and latent-projection noise
    user_id_dims: int = 4
    item_id_dims: int = 6
    user_feature_noise: float = 0.55
    item_feature_noise: float = 0.3

    def __post_init__(self):
        if self.n_users <= 0 or self.n_items <= 0:
            raise SimConfigError("n_users and n_items must be positive")
        if self.n_categories < 2:
            raise SimConfigError("need at least 2 categories")
        if not 0.0 <= self.position_decay <= 1.0:
            raise SimConfigError("position_decay must lie in [0, 1]")
        if self.pattern_table:
            for key in self.pattern_table:
                triple = tuple(int(x) for x in str(key).split(","))
                if len(triple) != 3 or any(
                    not 1 <= l <= self.n_layouts for l in triple
                ):
                    raise SimConfigError(
                        f"pattern_table key {key!r} does not fit {self.n_layouts} layouts"
                    )
        if self.k_weights and len(self.k_weights) != len(self.k_support):
            raise SimConfigError("k_weights must match k_support")

    def k_probabilities(self) -> np.ndarray:
        if not self.k_weights:
            return np.full(len(self.k_support), 1.0 / len(self.k_support))
        w = np.asarray(self.k_weights, dtype=np.float64)
        return w / w.sum()

    @property
    def k_max(self) -> int:
        return max(self.k_support)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_support"] = list(self.k_support)
        d["k_weights"] = list(self.k_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorConfig":
        d = dict(d)
        if "k_support" in d:
            d["k_support"] = tuple(d["k_support"])
        if "k_weights" in d:
            d["k_weights"] = tuple(d["k_weights"])
        return cls(**d)


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator for a (seed, index path); independent streams
    for distinct paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GroundTruthBehaviorModel:
    """Latent parameters of the simulated audience; the only source of 'real'
    feedback in this package."""

    config: BehaviorConfig
    seed: int
    user_latents: np.ndarray       # (n_users, d_lat)
    item_latents: np.ndarray       # (n_items, d_lat), unit rows
    item_quality: np.ndarray       # (n_items,)
    item_category: np.ndarray      # (n_items,) in [1, C]
    item_layout: np.ndarray        # (n_items,) in [1, M]
    layout_offsets: np.ndarray     # (M,)
    pattern_multipliers: np.ndarray  # (M^3,), indexed by (l1-1)*M^2+(l2-1)*M+(l3-1)

    def pattern_multiplier(self, l1: int, l2: int, l3: int) -> float:
        m = self.config.n_layouts
        return float(self.pattern_multipliers[(l1 - 1) * m * m + (l2 - 1) * m + (l3 - 1)])

    def attraction_logits(self, user_id: int, item_ids: np.ndarray) -> np.ndarray:
        """Ground-truth pre-list attraction: affinity + quality + layout offset."""
        item_ids = np.asarray(item_ids)
        dots = self.item_latents[item_ids] @ self.user_latents[user_id]
        return (
            self.config.affinity_scale * dots
            + self.item_quality[item_ids]
            + self.layout_offsets[self.item_layout[item_ids] - 1]
        )

    def attractions(self, user_ids: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
        """Per-position attraction for B lists: (B,) users x (B, K) items ->
        (B, K), including category saturation and layout-pattern effects."""
        cfg = self.config
        user_ids = np.asarray(user_ids)
        item_ids = np.asarray(item_ids)
        b, k = item_ids.shape
        dots = np.einsum(
            "bkd,bd->bk", self.item_latents[item_ids], self.user_latents[user_ids]
        )
        logits = (
            cfg.affinity_scale * dots
            + self.item_quality[item_ids]
            + self.layout_offsets[self.item_layout[item_ids] - 1]
        )
        base = _sigmoid(logits)

        cats = self.item_category[item_ids]
        repeats = np.zeros((b, k), dtype=np.int64)
        for d in range(1, cfg.saturation_window + 1):
            if d < k:
                repeats[:, d:] += cats[:, d:] == cats[:, :-d]
        sat = cfg.saturation_penalty ** repeats

        pat = np.ones((b, k))
        if k >= 3:
            lay = self.item_layout[item_ids] - 1
            m = cfg.n_layouts
            idx = lay[:, :-2] * m * m + lay[:, 1:-1] * m + lay[:, 2:]
            pat[:, 2:] = self.pattern_multipliers[idx]

        return np.clip(base * sat * pat, 0.0, 1.0)

    def simulate_clicks(self, attractions: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """Run the examination chain over B lists given per-position uniforms.

        e_1 = 1; e_j = e_{j-1} * decay * m_j with m_j depending on the two
        previous realized clicks; click_j = 1{u_j < e_j * p_j}.
        """
        cfg = self.config
        b, k = attractions.shape
        clicks = np.zeros((b, k), dtype=np.int8)
        e = np.ones(b)
        for j in range(k):
            if j >= 1:
                m = np.ones(b)
                prev = clicks[:, j - 1] == 1
                m[prev] = cfg.serpentine_adjacent
                if j >= 2:
                    skip = (clicks[:, j - 2] == 1) & ~prev
                    m[skip] = cfg.serpentine_skip
                e = e * cfg.position_decay * m
            clicks[:, j] = uniforms[:, j] < e * attractions[:, j]
        return clicks


@dataclass
class Universe:
    """Sampled users, items, position table, and the behavior model."""

    config: BehaviorConfig
    seed: int
    user_features: np.ndarray   # (n_users, 24)
    item_features: np.ndarray   # (n_items, 32)
    item_category: np.ndarray
    item_layout: np.ndarray
    item_quality_decile: np.ndarray
    position_table: PositionTable
    behavior: GroundTruthBehaviorModel

    @property
    def n_users(self) -> int:
        return self.user_features.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_features.shape[0]

    def user(self, user_id: int) -> User:
        return User(user_id=user_id, features=self.user_features[user_id])

    def item(self, item_id: int) -> Item:
        return Item(
            item_id=item_id,
            category=int(self.item_category[item_id]),
            layout=int(self.item_layout[item_id]),
            tag_set=self.tag_set(item_id),
            features=self.item_features[item_id],
        )

    def tag_set(self, item_id: int) -> frozenset:
        """Small namespaced tags for Jaccard distances: category, layout,
        quality decile."""
        return frozenset(
            {
                (0, int(self.item_category[item_id])),
                (1, int(self.item_layout[item_id])),
                (2, int(self.item_quality_decile[item_id])),
            }
        )

    def jaccard_matrix(self, item_ids: np.ndarray) -> np.ndarray:
        """Pairwise Jaccard distances over the namespaced 3-tags; closed form
        1 - eq / (6 - eq) with eq the number of matching fields."""
        item_ids = np.asarray(item_ids)
        eq = np.zeros(item_ids.shape + item_ids.shape[-1:], dtype=np.int64)
        for arr in (self.item_category, self.item_layout, self.item_quality_decile):
            v = arr[item_ids]
            eq += v[..., :, None] == v[..., None, :]
        return 1.0 - eq / (6.0 - eq)


def sample_universe(config: BehaviorConfig, seed: int) -> Universe:
    """Draw the full synthetic world deterministically from (config, seed)."""
    cfg = config
    rng = rng_for(seed, 0)

    u_lat = rng.standard_normal((cfg.n_users, cfg.d_lat))
    i_raw = rng.standard_normal((cfg.n_items, cfg.d_lat))
    i_lat = i_raw / np.linalg.norm(i_raw, axis=1, keepdims=True)
    quality = rng.normal(cfg.quality_mean, cfg.quality_std, size=cfg.n_items)
    category = rng.integers(1, cfg.n_categories + 1, size=cfg.n_items)
    layout = rng.integers(1, cfg.n_layouts + 1, size=cfg.n_items)
    layout_offsets = rng.normal(0.0, cfg.layout_offset_std, size=cfg.n_layouts)

    m = cfg.n_layouts
    pattern = np.ones(m ** 3)
    if cfg.pattern_table:
        for key, mult in sorted(cfg.pattern_table.items()):
            l1, l2, l3 = (int(x) for x in str(key).split(","))
            pattern[(l1 - 1) * m * m + (l2 - 1) * m + (l3 - 1)] = float(mult)
    else:
        n_special = cfg.n_good_patterns + cfg.n_bad_patterns
        if n_special > m ** 3:
            raise SimConfigError("more special patterns than layout triples")
        chosen = rng.choice(m ** 3, size=n_special, replace=False)
        pattern[chosen[: cfg.n_good_patterns]] = cfg.good_pattern_multiplier
        pattern[chosen[cfg.n_good_patterns:]] = cfg.bad_pattern_multiplier

    behavior = GroundTruthBehaviorModel(
        config=cfg,
        seed=seed,
        user_latents=u_lat,
        item_latents=i_lat,
        item_quality=quality,
        item_category=category,
        item_layout=layout,
        layout_offsets=layout_offsets,
        pattern_multipliers=pattern,
    )

    # Observable features: a random per-id key plus a noisy projection of the
    # latent factor.  The projection underdetermines the latent, so exposure
    # context stays informative.
    fr = rng_for(seed, 1)
    uf = np.empty((cfg.n_users, USER_DIM))
    uf[:, : cfg.user_id_dims] = fr.standard_normal((cfg.n_users, cfg.user_id_dims))
    d_proj = USER_DIM - cfg.user_id_dims
    w_u = fr.standard_normal((cfg.d_lat, d_proj)) / np.sqrt(cfg.d_lat)
    uf[:, cfg.user_id_dims:] = u_lat @ w_u + cfg.user_feature_noise * fr.standard_normal(
        (cfg.n_users, d_proj)
    )

    decile = np.minimum((np.argsort(np.argsort(quality)) * 10) // cfg.n_items, 9)

    itf = np.empty((cfg.n_items, ITEM_DIM))
    pos = 0
    itf[:, pos : pos + cfg.item_id_dims] = fr.standard_normal((cfg.n_items, cfg.item_id_dims))
    pos += cfg.item_id_dims
    d_iproj = ITEM_DIM - cfg.item_id_dims - cfg.n_categories - cfg.n_layouts - 2
    if d_iproj <= 0:
        raise SimConfigError("item feature layout overflows the 32-wide descriptor")
    w_i = fr.standard_normal((cfg.d_lat, d_iproj)) / np.sqrt(cfg.d_lat)
    itf[:, pos : pos + d_iproj] = i_lat @ w_i + cfg.item_feature_noise * fr.standard_normal(
        (cfg.n_items, d_iproj)
    )
    pos += d_iproj
    cat_onehot = np.zeros((cfg.n_items, cfg.n_categories))
    cat_onehot[np.arange(cfg.n_items), category - 1] = 1.0
    itf[:, pos : pos + cfg.n_categories] = cat_onehot
    pos += cfg.n_categories
    lay_onehot = np.zeros((cfg.n_items, cfg.n_layouts))
    lay_onehot[np.arange(cfg.n_items), layout - 1] = 1.0
    itf[:, pos : pos + cfg.n_layouts] = lay_onehot
    pos += cfg.n_layouts
    itf[:, pos] = quality + cfg.item_feature_noise * fr.standard_normal(cfg.n_items)
    itf[:, pos + 1] = decile / 9.0

    pos_table = PositionTable(embeddings=fr.standard_normal((cfg.k_max, POS_DIM)))

    return Universe(
        config=cfg,
        seed=seed,
        user_features=uf,
        item_features=itf,
        item_category=category,
        item_layout=layout,
        item_quality_decile=decile,
        position_table=pos_table,
        behavior=behavior,
    )


# ---------------------------------------------------------------------------
# Session simulation and the Monte-Carlo oracle
# ---------------------------------------------------------------------------

def simulate_session(model: GroundTruthBehaviorModel, user_id: int, item_ids, seed: int) -> np.ndarray:
    """Sample one click vector for an exposed list; deterministic in seed."""
    item_ids = np.asarray(item_ids, dtype=np.int64)[None, :]
    p = model.attractions(np.asarray([user_id]), item_ids)
    uniforms = rng_for(seed).random((1, item_ids.shape[1]))
    return model.simulate_clicks(p, uniforms)[0]


def simulate_sessions(
    model: GroundTruthBehaviorModel,
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    seeds: np.ndarray,
) -> np.ndarray:
    """Batched sessions over equal-length lists; row i reproduces
    simulate_session(model, user_ids[i], item_ids[i], seeds[i]) exactly."""
    item_ids = np.asarray(item_ids)
    b, k = item_ids.shape
    uniforms = np.empty((b, k))
    for i, s in enumerate(seeds):
        uniforms[i] = rng_for(int(s)).random(k)
    p = model.attractions(user_ids, item_ids)
    return model.simulate_clicks(p, uniforms)


def expected_clicks_oracle(
    model: GroundTruthBehaviorModel,
    user_id: int,
    item_ids,
    n_draws: int,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo per-position expected clicks and their standard errors.

    Draw 0 coincides with simulate_session under the same seed.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    item_ids = np.asarray(item_ids, dtype=np.int64)[None, :]
    k = item_ids.shape[1]
    p = model.attractions(np.asarray([user_id]), item_ids)
    uniforms = rng_for(seed).random((n_draws, k))
    clicks = model.simulate_clicks(np.repeat(p, n_draws, axis=0), uniforms)
    mean = clicks.mean(axis=0)
    se = clicks.std(axis=0, ddof=1) / np.sqrt(n_draws) if n_draws > 1 else np.full(k, np.nan)
    return mean, se


def expected_total_clicks(
    model: GroundTruthBehaviorModel,
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    n_draws: int,
    seed: int,
) -> np.ndarray:
    """Mean total clicks per list over n_draws sessions (B equal-K lists)."""
    item_ids = np.asarray(item_ids)
    b, k = item_ids.shape
    p = model.attractions(user_ids, item_ids)
    totals = np.zeros(b)
    uniforms = np.empty((b * n_draws, k))
    for i in range(b):
        uniforms[i * n_draws : (i + 1) * n_draws] = rng_for(seed, i).random((n_draws, k))
    clicks = model.simulate_clicks(np.repeat(p, n_draws, axis=0), uniforms)
    totals = clicks.sum(axis=1).reshape(b, n_draws).mean(axis=1)
    return totals


# ---------------------------------------------------------------------------
# Logging policies and dataset generation
# ---------------------------------------------------------------------------

def _order_pool(
    model: GroundTruthBehaviorModel,
    user_ids: np.ndarray,
    pools: np.ndarray,
    k: int,
    policy: str,
    epsilon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pick and order K of the N pooled items per row, by policy."""
    b, n = pools.shape
    if policy == "uniform-random":
        perm = np.argsort(rng.random((b, n)), axis=1)[:, :k]
        return np.take_along_axis(pools, perm, axis=1)

    logits = np.einsum(
        "bnd,bd->bn", model.item_latents[pools], model.user_latents[user_ids]
    ) * model.config.affinity_scale
    logits = logits + model.item_quality[pools]
    logits = logits + model.layout_offsets[model.item_layout[pools] - 1]

    if policy == "quality-greedy":
        order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(pools, order, axis=1)

    if policy == "eps-mixture":
        # per-step: with prob epsilon pick uniformly among remaining items,
        # otherwise the best remaining by ground-truth attraction
        chosen = np.empty((b, k), dtype=np.int64)
        scores = logits.copy()
        alive = np.ones((b, n), dtype=bool)
        rows = np.arange(b)
        for j in range(k):
            explore = rng.random(b) < epsilon
            masked = np.where(alive, scores, -np.inf)
            pick = np.argmax(masked, axis=1)
            u = rng.random((b, n))
            u[~alive] = -1.0
            rand_pick = np.argmax(u, axis=1)
            pick[explore] = rand_pick[explore]
            chosen[:, j] = pools[rows, pick]
            alive[rows, pick] = False
        return chosen

    raise SimConfigError(f"unknown logging policy: {policy!r} (choose from {LOGGING_POLICIES})")


def generate_log(
    universe: Universe,
    policy: str,
    n_lists: int,
    seed: int,
    epsilon: float = 0.3,
    chunk: int = 4096,
):
    """Yield LogRecords: per record sample a user, a length K, a pool of
    N = 2K distinct items, order by the logging policy, and simulate clicks.
    """
    if policy not in LOGGING_POLICIES:
        raise SimConfigError(f"unknown logging policy: {policy!r} (choose from {LOGGING_POLICIES})")
    cfg = universe.config
    model = universe.behavior
    if universe.n_items < 2 * cfg.k_max:
        raise SimConfigError(
            f"item universe ({universe.n_items}) smaller than 2*K_max ({2 * cfg.k_max})"
        )
    k_support = np.asarray(cfg.k_support)
    k_probs = cfg.k_probabilities()

    produced = 0
    chunk_idx = 0
    while produced < n_lists:
        b = min(chunk, n_lists - produced)
        rng = rng_for(seed, 2, chunk_idx)
        users = rng.integers(0, universe.n_users, size=b)
        ks = rng.choice(k_support, size=b, p=k_probs)
        for k in sorted(set(int(x) for x in ks)):
            sel = np.where(ks == k)[0]
            pools = np.empty((sel.size, 2 * k), dtype=np.int64)
            for i, row in enumerate(sel):
                pools[i] = rng.choice(universe.n_items, size=2 * k, replace=False)
            exposed = _order_pool(model, users[sel], pools, k, policy, epsilon, rng)
            session_seeds = [
                _derive_session_seed(seed, chunk_idx, int(row)) for row in sel
            ]
            clicks = simulate_sessions(model, users[sel], exposed, session_seeds)
            for i, row in enumerate(sel):
                items = exposed[i]
                yield LogRecord(
                    user_id=int(users[row]),
                    item_ids=tuple(int(x) for x in items),
                    categories=tuple(int(x) for x in universe.item_category[items]),
                    layouts=tuple(int(x) for x in universe.item_layout[items]),
                    clicks=tuple(int(x) for x in clicks[i]),
                    pool_ids=tuple(int(x) for x in pools[i]),
                )
        produced += b
        chunk_idx += 1


def _derive_session_seed(seed: int, chunk_idx: int, row: int) -> int:
    return int(
        np.random.SeedSequence([int(seed), 3, int(chunk_idx), int(row)]).generate_state(1)[0]
    )


def behavior_config_to_json(config: BehaviorConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def behavior_config_from_json(path) -> BehaviorConfig:
    with open(path, "r", encoding="utf-8") as f:
        return BehaviorConfig.from_dict(json.load(f))
