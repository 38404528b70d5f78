"""Q-learning for list generators: replay memory, target network, TD updates.

Episodes decode full lists with an epsilon-greedy behavior policy.  Rewards
come either from a frozen evaluator scored once on the completed list, with
its per-position predictions distributed back to the K transitions
("simulated" mode), or from logged clicks replayed off-policy ("real" mode).

The TD target is reward + max_a q'(next state, a) from a delayed parameter
copy, with the max term dropped at the terminal step; the horizon is the list
length and there is no discounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .data import FEATURE_DIM, ITEM_DIM, USER_DIM
from .generators import GeneratorModel
from .simulator import rng_for


@dataclass(frozen=True)
class Transition:
    """One decode step: state snapshot, action, reward, next-state snapshot."""

    user_id: int
    pool: tuple[int, ...]        # item ids, fixed for the episode
    prefix: tuple[int, ...]      # 0-based pool positions chosen before this step
    action: int                  # 0-based pool position chosen at this step
    reward: float
    next_prefix: tuple[int, ...]
    terminal: bool
    k: int                       # episode horizon


class ReplayBuffer:
    """Fixed-capacity ring of transitions with strictly FIFO eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def snapshot(self) -> list[Transition]:
        return list(self._items)


class TargetNetworkHandle:
    """Delayed full copy of the generator parameters, synced on a period."""

    def __init__(self, params: dict, sync_period: int):
        if sync_period < 1:
            raise ValueError("sync_period must be positive")
        self.params = {k: v.copy() for k, v in params.items()}
        self.sync_period = sync_period
        self._updates_since_sync = 0

    def after_update(self, params: dict) -> bool:
        """Count one optimizer step; copy at sync boundaries.  Returns whether
        a sync happened."""
        self._updates_since_sync += 1
        if self._updates_since_sync >= self.sync_period:
            self.params = {k: v.copy() for k, v in params.items()}
            self._updates_since_sync = 0
            return True
        return False


@dataclass
class QLearningConfig:
    episodes: int = 3000
    batch_transitions: int = 256
    updates_per_episode: int = 1
    min_fill: int = 2000
    replay_capacity: int = 100_000
    sync_period: int = 1000
    learning_rate: float = 1e-3
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    seed: int = 0
    telemetry_every: int = 100


def td_target(reward: float, next_state_max: float | None, terminal: bool) -> float:
    """reward + max_a q'(s', a), with the max term dropped at the terminal step."""
    if terminal:
        return reward
    if next_state_max is None:
        raise ValueError("non-terminal transition needs the next-state max")
    return reward + next_state_max


def _epsilon_at(cfg: QLearningConfig, episode: int) -> float:
    if cfg.episodes <= 1:
        return cfg.epsilon_end
    frac = episode / (cfg.episodes - 1)
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


def collect_episode(
    gen: GeneratorModel,
    user_id: int,
    pool: np.ndarray,
    k: int,
    user_feats: np.ndarray,
    pool_feats: np.ndarray,
    rewards_fn,
    epsilon: float,
    rng: np.random.Generator,
) -> list[Transition]:
    """Decode one list epsilon-greedily and package its K transitions.

    rewards_fn(chosen_positions) -> per-position rewards for the completed
    list.
    """
    n = pool.shape[0]
    h = gen.initial_hidden(1)
    pooled = gen.pool_vector(pool_feats)
    mask = np.ones(n, dtype=bool)
    chosen: list[int] = []
    for j in range(1, k + 1):
        feats = gen.candidate_features(user_feats, pool_feats, j)
        if rng.random() < epsilon:
            alive = np.flatnonzero(mask)
            pick = int(alive[rng.integers(0, alive.size)])
        else:
            scores = gen.score_candidates(feats, h, pooled)[0]
            pick = int(np.argmax(np.where(mask, scores, -np.inf)))
        chosen.append(pick)
        mask[pick] = False
        h = gen.advance_hidden(feats[None, pick, :], h)
    rewards = rewards_fn(np.asarray(chosen))
    pool_t = tuple(int(x) for x in pool)
    out = []
    for j, action in enumerate(chosen):
        out.append(
            Transition(
                user_id=int(user_id),
                pool=pool_t,
                prefix=tuple(chosen[:j]),
                action=int(action),
                reward=float(rewards[j]),
                next_prefix=tuple(chosen[: j + 1]),
                terminal=j == k - 1,
                k=k,
            )
        )
    return out


def _next_state_maxes(gen: GeneratorModel, target_params: dict,
                      batch: list[Transition], user_features, item_features) -> np.ndarray:
    """max_a q'(s', a) per transition under the target parameters (0 for
    terminal transitions).  Grouped by prefix length so the recurrence batches.
    """
    out = np.zeros(len(batch))
    by_len: dict[tuple[int, int], list[int]] = {}
    for i, tr in enumerate(batch):
        if not tr.terminal:
            by_len.setdefault((len(tr.next_prefix), len(tr.pool)), []).append(i)
    for (plen, n), idxs in sorted(by_len.items()):
        rows = [batch[i] for i in idxs]
        b = len(rows)
        uf = user_features[[tr.user_id for tr in rows]]
        pf = item_features[np.asarray([tr.pool for tr in rows])]  # (b, n, 32)
        prefixes = np.asarray([tr.next_prefix for tr in rows], dtype=np.int64)
        h = np.zeros((b, gen.hidden))
        pooled = None
        if gen.kind == "settoseq":
            pooled = layers.dense_np(target_params, "enc", pf, "tanh").sum(axis=1)
        rng_rows = np.arange(b)
        if gen.kind != "mlp":
            for step in range(1, plen + 1):
                step_feats = _step_feats(gen, uf, pf, step)
                x = step_feats[rng_rows, prefixes[:, step - 1]]
                h = layers.gru_step_np(target_params, "gru", x, h)
        step_feats = _step_feats(gen, uf, pf, plen + 1)
        scores = _score_all_np(gen, target_params, step_feats, h, pooled)
        mask = np.ones((b, n), dtype=bool)
        mask[rng_rows[:, None], prefixes] = False
        out[idxs] = np.max(np.where(mask, scores, -np.inf), axis=1)
    return out


def _score_all_np(gen: GeneratorModel, params: dict, step_feats: np.ndarray,
                  h: np.ndarray, pooled: np.ndarray | None) -> np.ndarray:
    """(B, N) scores for B states, each over its own N candidates."""
    b, n, _ = step_feats.shape
    if gen.kind == "mlp":
        return layers.mlp_np(params, "head", step_feats, 3, gen.head_activation)[:, :, 0]
    parts = [np.broadcast_to(h[:, None, :], (b, n, gen.hidden))]
    if gen.kind == "settoseq":
        parts.append(np.broadcast_to(pooled[:, None, :], (b, n, gen.POOL_DIM)))
    parts.append(step_feats)
    x = np.concatenate(parts, axis=-1)
    return layers.mlp_np(params, "head", x, 2, gen.head_activation)[:, :, 0]


def _chosen_q_loss(gen: GeneratorModel, graph: ad.Graph, p: dict,
                   batch: list[Transition], targets: np.ndarray,
                   user_features, item_features):
    """Mean squared TD error; groups transitions by prefix length so the
    prefix recurrences batch."""
    by_len: dict[tuple[int, int], list[int]] = {}
    for i, tr in enumerate(batch):
        by_len.setdefault((len(tr.prefix), len(tr.pool)), []).append(i)
    terms = []
    for (plen, n), idxs in sorted(by_len.items()):
        rows = [batch[i] for i in idxs]
        b = len(rows)
        uf = user_features[[tr.user_id for tr in rows]]
        pools = np.asarray([tr.pool for tr in rows])
        pf = item_features[pools]  # (b, n, 32)
        pooled = None
        if gen.kind == "settoseq":
            pooled = gen.taped_pool_vector(graph, p, pf)
        h = graph.constant(np.zeros((b, gen.hidden)))
        prefixes = np.asarray([tr.prefix for tr in rows], dtype=np.int64).reshape(b, plen)
        actions = np.asarray([tr.action for tr in rows])
        rng_rows = np.arange(b)
        if gen.kind != "mlp":
            for step in range(1, plen + 1):
                step_feats = _step_feats(gen, uf, pf, step)
                x = graph.constant(step_feats[rng_rows, prefixes[:, step - 1]])
                h = layers.gru_step(p, "gru", x, h)
        step_feats = _step_feats(gen, uf, pf, plen + 1)
        x_chosen = graph.constant(step_feats[rng_rows, actions])
        q = gen.taped_step_scores(graph, p, x_chosen, h, pooled)
        y = graph.constant(targets[idxs].reshape(b, 1))
        diff = q - y
        terms.append(ad.sumall(diff * diff))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(batch))


def _step_feats(gen: GeneratorModel, uf: np.ndarray, pf: np.ndarray, step: int) -> np.ndarray:
    """(B, N, 64) candidate features at one step for B pools."""
    b, n, _ = pf.shape
    x = np.empty((b, n, FEATURE_DIM))
    x[:, :, :USER_DIM] = uf[:, None, :]
    x[:, :, USER_DIM:USER_DIM + ITEM_DIM] = pf
    x[:, :, USER_DIM + ITEM_DIM:] = gen.pos_table[step - 1]
    return x


def train_generator_ql(
    gen: GeneratorModel,
    cfg: QLearningConfig,
    user_features: np.ndarray,
    item_features: np.ndarray,
    episode_source,
    buffer: ReplayBuffer | None = None,
    target: TargetNetworkHandle | None = None,
) -> list[tuple[int, float, float]]:
    """Generic TD(0) training loop over an episode source.

    `episode_source(episode_index, epsilon, rng)` returns the transitions of
    one episode (already rewarded).  Returns telemetry rows of
    (update_step, mean TD loss, mean episode reward) sampled every
    `telemetry_every` update steps.
    """
    if buffer is None:
        buffer = ReplayBuffer(cfg.replay_capacity)
    if target is None:
        target = TargetNetworkHandle(gen.params, cfg.sync_period)
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    telemetry = []
    update_step = 0
    reward_window: list[float] = []
    loss_window: list[float] = []
    for episode in range(cfg.episodes):
        rng = rng_for(cfg.seed, 17, episode)
        transitions = episode_source(episode, _epsilon_at(cfg, episode), rng)
        for tr in transitions:
            buffer.push(tr)
        if transitions:
            reward_window.append(sum(tr.reward for tr in transitions))
        if len(buffer) < cfg.min_fill:
            continue
        for u in range(cfg.updates_per_episode):
            batch = buffer.sample(cfg.batch_transitions, rng)
            maxes = _next_state_maxes(gen, target.params, batch, user_features, item_features)
            targets = np.asarray(
                [td_target(tr.reward, mx, tr.terminal) for tr, mx in zip(batch, maxes)]
            )
            graph = ad.Graph()
            p = graph.parameters(gen.params)
            loss = _chosen_q_loss(gen, graph, p, batch, targets, user_features, item_features)
            grads = graph.backward(loss)
            gen.params, state = ad.adam_step(gen.params, grads, state)
            target.after_update(gen.params)
            update_step += 1
            loss_window.append(float(loss.values))
            if update_step % cfg.telemetry_every == 0:
                telemetry.append(
                    (
                        update_step,
                        float(np.mean(loss_window)),
                        float(np.mean(reward_window)) if reward_window else 0.0,
                    )
                )
                loss_window.clear()
                reward_window.clear()
    return telemetry


def simulated_episode_source(
    gen: GeneratorModel,
    evaluator,
    universe,
    cfg: QLearningConfig,
    k_support=None,
    pool_factor: int = 2,
):
    """Episodes over fresh candidate sets, rewarded by the evaluator's
    per-position predictions on the completed list."""
    user_features = universe.user_features
    item_features = universe.item_features
    support = np.asarray(k_support if k_support is not None else universe.config.k_support)
    probs = (
        universe.config.k_probabilities()
        if k_support is None
        else np.full(len(support), 1.0 / len(support))
    )

    def source(episode: int, epsilon: float, rng: np.random.Generator):
        user_id = int(rng.integers(0, universe.n_users))
        k = int(rng.choice(support, p=probs))
        pool = rng.choice(universe.n_items, size=pool_factor * k, replace=False)
        pf = item_features[pool]
        uf = user_features[user_id]

        def rewards_fn(chosen_positions):
            per_pos = evaluator.predict(uf[None, :], pf[chosen_positions][None, :, :])[0]
            return per_pos

        return collect_episode(
            gen, user_id, pool, k, uf, pf, rewards_fn, epsilon, rng
        )

    return source


def replayed_log_source(gen: GeneratorModel, groups: dict, universe):
    """Off-policy episodes replayed from logged lists; rewards are the logged
    clicks and actions must come from the logged pool."""
    order = []
    for k in sorted(groups):
        users, items, clicks, pools = groups[k]
        for i in range(users.shape[0]):
            order.append((k, i))

    def source(episode: int, epsilon: float, rng: np.random.Generator):
        k, i = order[episode % len(order)]
        users, items, clicks, pools = groups[k]
        pool = pools[i]
        pos_of = {int(item): idx for idx, item in enumerate(pool)}
        try:
            actions = [pos_of[int(item)] for item in items[i]]
        except KeyError as e:
            raise ValueError(
                f"logged action {e} is outside the logged pool; cannot replay"
            ) from e
        pool_t = tuple(int(x) for x in pool)
        out = []
        for j, action in enumerate(actions):
            out.append(
                Transition(
                    user_id=int(users[i]),
                    pool=pool_t,
                    prefix=tuple(actions[:j]),
                    action=int(action),
                    reward=float(clicks[i, j]),
                    next_prefix=tuple(actions[: j + 1]),
                    terminal=j == k - 1,
                    k=k,
                )
            )
        return out

    return source
