import numpy as np
import pytest

from slateforge import autodiff as ad
from slateforge.generators import (
    DecodeState,
    GeneratorModel,
    GenTrainConfig,
    Policy,
    as_reclist,
    decode,
    generate_best_of_n,
    priority_scores,
    sampling_probabilities,
    train_generator_sl,
)
from slateforge.qlearning import (
    QLearningConfig,
    ReplayBuffer,
    TargetNetworkHandle,
    Transition,
    collect_episode,
    td_target,
    train_generator_ql,
)


def make_gen(kind, k_max=8, seed=0, head="sigmoid"):
    pos = np.random.default_rng(700 + seed).standard_normal((k_max, 8))
    return GeneratorModel.create(kind, pos, seed=seed, head=head)


def pool_setup(rng, n=10):
    return rng.standard_normal(24), rng.standard_normal((n, 32))


class TestScoring:
    def test_settoseq_candidate_permutation_invariance(self):
        rng = np.random.default_rng(1)
        gen = make_gen("settoseq")
        uf, pf = pool_setup(rng)
        state = DecodeState(user_id=0, pool_ids=tuple(range(10)), prefix=(2, 5))
        base = priority_scores(gen, state, uf, pf)
        perm = rng.permutation(10)
        inv = np.argsort(perm)
        state_p = DecodeState(
            user_id=0,
            pool_ids=tuple(int(perm[i]) for i in range(10)),
            prefix=(int(inv[2]), int(inv[5])),
        )
        moved = priority_scores(gen, state_p, uf, pf[perm])
        np.testing.assert_allclose(moved[inv], base, atol=1e-9)

    def test_chosen_items_masked(self):
        rng = np.random.default_rng(2)
        for kind in ("mlp", "grnn", "settoseq"):
            gen = make_gen(kind)
            uf, pf = pool_setup(rng)
            state = DecodeState(user_id=0, pool_ids=tuple(range(10)), prefix=(0, 7))
            scores = priority_scores(gen, state, uf, pf)
            assert scores[0] == -np.inf and scores[7] == -np.inf
            assert np.all(np.isfinite(np.delete(scores, [0, 7])))

    def test_empty_remaining_rejected(self):
        gen = make_gen("mlp", k_max=4)
        rng = np.random.default_rng(3)
        uf, pf = pool_setup(rng, n=3)
        state = DecodeState(user_id=0, pool_ids=(0, 1, 2), prefix=(0, 1, 2))
        with pytest.raises(ValueError, match="remaining"):
            priority_scores(gen, state, uf, pf)

    def test_mlp_ignores_prefix_while_recurrent_kinds_react(self):
        rng = np.random.default_rng(4)
        uf, pf = pool_setup(rng)
        s1 = DecodeState(user_id=0, pool_ids=tuple(range(10)), prefix=(1, 2))
        s2 = DecodeState(user_id=0, pool_ids=tuple(range(10)), prefix=(3, 4))

        mlp_gen = make_gen("mlp")
        a = priority_scores(mlp_gen, s1, uf, pf)
        b = priority_scores(mlp_gen, s2, uf, pf)
        keep = [i for i in range(10) if i not in (1, 2, 3, 4)]
        np.testing.assert_array_equal(a[keep], b[keep])

        for kind in ("grnn", "settoseq"):
            gen = make_gen(kind)
            a = priority_scores(gen, s1, uf, pf)
            b = priority_scores(gen, s2, uf, pf)
            assert np.any(a[keep] != b[keep])

    def test_numpy_and_tape_scoring_agree(self):
        rng = np.random.default_rng(5)
        for kind in ("mlp", "grnn", "settoseq"):
            gen = make_gen(kind)
            uf, pf = pool_setup(rng)
            state = DecodeState(user_id=0, pool_ids=tuple(range(10)), prefix=(4,))
            scores = priority_scores(gen, state, uf, pf)
            # recompute one candidate's score on the tape
            cand = 6
            graph = ad.Graph()
            p = graph.parameters(gen.params)
            pooled = None
            if kind == "settoseq":
                pooled = gen.taped_pool_vector(graph, p, pf[None, :, :])
            h = graph.constant(np.zeros((1, gen.hidden)))
            if kind != "mlp":
                step1 = gen.candidate_features(uf, pf, 1)
                import slateforge.layers as layers

                h = layers.gru_step(p, "gru", graph.constant(step1[None, 4]), h)
            step2 = gen.candidate_features(uf, pf, 2)
            q = gen.taped_step_scores(graph, p, graph.constant(step2[None, cand]), h, pooled)
            assert abs(float(q.values[0, 0]) - scores[cand]) < 1e-12


class TestDecode:
    def test_single_candidate_single_slot(self):
        rng = np.random.default_rng(6)
        uf, pf = pool_setup(rng, n=1)
        for kind in ("mlp", "grnn", "settoseq"):
            gen = make_gen(kind)
            for policy in (Policy("greedy"), Policy("sampling", n=3), Policy("beam", width=2)):
                lists = decode(gen, uf, pf, 1, policy, seed=1)
                assert np.all(lists == 0)

    def test_greedy_deterministic_and_distinct(self):
        rng = np.random.default_rng(7)
        gen = make_gen("grnn")
        uf, pf = pool_setup(rng)
        a = decode(gen, uf, pf, 6, Policy("greedy"))
        b = decode(gen, uf, pf, 6, Policy("greedy"))
        np.testing.assert_array_equal(a, b)
        assert len(set(a[0].tolist())) == 6

    def test_greedy_tie_breaks_to_lowest_index(self):
        gen = make_gen("mlp")
        # zero the output layer so every candidate scores exactly the same
        gen.params["head.l2.w"][:] = 0.0
        rng = np.random.default_rng(8)
        uf = rng.standard_normal(24)
        pf = rng.standard_normal((5, 32))
        lists = decode(gen, uf, pf, 3, Policy("greedy"))
        np.testing.assert_array_equal(lists[0], [0, 1, 2])

    def test_equal_scores_give_uniform_first_step_probabilities(self):
        gen = make_gen("mlp")
        scores = np.zeros((1, 8))
        mask = np.ones((1, 8), dtype=bool)
        p = sampling_probabilities(gen, scores, mask, temperature=1.0)
        np.testing.assert_allclose(p, np.full((1, 8), 1 / 8), atol=1e-15)

    def test_probabilities_sum_to_one_and_zero_on_chosen(self):
        rng = np.random.default_rng(9)
        scores = rng.standard_normal((4, 10))
        mask = np.ones((4, 10), dtype=bool)
        mask[:, [2, 5]] = False
        p = sampling_probabilities(make_gen("mlp"), scores, mask, 0.7)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(4), atol=1e-12)
        assert np.all(p[:, [2, 5]] == 0.0)

    def test_low_temperature_limit_matches_greedy(self):
        rng = np.random.default_rng(10)
        gen = make_gen("grnn")
        uf, pf = pool_setup(rng)
        greedy = decode(gen, uf, pf, 5, Policy("greedy"))[0]
        sampled = decode(gen, uf, pf, 5, Policy("sampling", temperature=1e-6, n=1000), seed=11)
        assert np.all(sampled == greedy)

    def test_insufficient_pool_rejected(self):
        rng = np.random.default_rng(11)
        gen = make_gen("mlp")
        uf, pf = pool_setup(rng, n=3)
        with pytest.raises(ValueError, match="N >= K"):
            decode(gen, uf, pf, 5, Policy("greedy"))

    def test_beam_returns_width_distinct_lists(self):
        rng = np.random.default_rng(12)
        gen = make_gen("settoseq")
        uf, pf = pool_setup(rng)
        lists = decode(gen, uf, pf, 4, Policy("beam", width=3))
        assert lists.shape == (3, 4)
        for row in lists:
            assert len(set(row.tolist())) == 4
        assert len({tuple(r) for r in lists.tolist()}) == 3

    def test_as_reclist_converts_to_one_based(self):
        rl = as_reclist(np.asarray([0, 3, 1]))
        assert rl.indices == (1, 4, 2)


class FirstItemEvaluator:
    """Scores a list by how strongly its first item matches a target vector."""

    def __init__(self, target):
        self.target = target

    def predict(self, user_feats, item_feats):
        b, k, _ = item_feats.shape
        out = np.full((b, k), 0.05)
        sim = item_feats[:, 0, :] @ self.target
        out[:, 0] = 1.0 / (1.0 + np.exp(-sim))
        return out


class _FakeConfig:
    def __init__(self, k_support):
        self.k_support = tuple(k_support)

    def k_probabilities(self):
        return np.full(len(self.k_support), 1.0 / len(self.k_support))


class FakeUniverse:
    """Just enough of the universe surface for the episode source."""

    def __init__(self, user_features, item_features, k_support):
        self.user_features = user_features
        self.item_features = item_features
        self.config = _FakeConfig(k_support)

    @property
    def n_users(self):
        return self.user_features.shape[0]

    @property
    def n_items(self):
        return self.item_features.shape[0]


class TestBestOfN:
    def test_n_is_one_skips_evaluator(self):
        rng = np.random.default_rng(13)
        gen = make_gen("grnn")
        uf, pf = pool_setup(rng)
        best, lists, totals = generate_best_of_n(gen, None, uf, pf, 4, 1, 0.8, seed=2)
        assert totals is None and lists.shape == (1, 4)
        np.testing.assert_array_equal(best, lists[0])

    def test_selected_is_the_argmax(self):
        rng = np.random.default_rng(14)
        gen = make_gen("grnn")
        uf, pf = pool_setup(rng)
        ev = FirstItemEvaluator(rng.standard_normal(32))
        best, lists, totals = generate_best_of_n(gen, ev, uf, pf, 4, 12, 0.8, seed=3)
        assert np.max(totals) == totals[int(np.argmax(totals))]
        np.testing.assert_array_equal(best, lists[int(np.argmax(totals))])

    def test_common_seed_superset_monotone(self):
        rng = np.random.default_rng(15)
        gen = make_gen("grnn")
        ev = FirstItemEvaluator(rng.standard_normal(32))
        for trial in range(20):
            uf, pf = pool_setup(rng)
            _, l20, t20 = generate_best_of_n(gen, ev, uf, pf, 4, 20, 0.8, seed=trial)
            _, l40, t40 = generate_best_of_n(gen, ev, uf, pf, 4, 40, 0.8, seed=trial)
            np.testing.assert_array_equal(l40[:20], l20)
            assert np.max(t40) >= np.max(t20)


class TestReplayBuffer:
    @staticmethod
    def _tr(tag):
        return Transition(
            user_id=tag, pool=(0, 1), prefix=(), action=0,
            reward=0.0, next_prefix=(0,), terminal=False, k=2,
        )

    def test_capacity_never_exceeded(self):
        buf = ReplayBuffer(5)
        for i in range(17):
            buf.push(self._tr(i))
        assert len(buf) == 5

    def test_fifo_eviction_order(self):
        buf = ReplayBuffer(3)
        for i in range(5):
            buf.push(self._tr(i))
        tags = sorted(t.user_id for t in buf.snapshot())
        assert tags == [2, 3, 4]

    def test_sampling_uniform_over_contents(self):
        buf = ReplayBuffer(10)
        for i in range(10):
            buf.push(self._tr(i))
        rng = np.random.default_rng(0)
        seen = [t.user_id for t in buf.sample(10_000, rng)]
        counts = np.bincount(seen, minlength=10)
        assert np.all(counts > 800)


class TestTdTargets:
    def test_terminal_target_is_reward(self):
        assert td_target(0.7, None, terminal=True) == 0.7

    def test_nonterminal_adds_next_max(self):
        assert td_target(0.5, 1.25, terminal=False) == 1.75

    def test_two_step_episode_telescopes(self):
        # sum of TD targets under a fixed network = total reward + the
        # non-terminal max terms
        r1, r2 = 0.4, 0.9
        next_max = 0.6
        t1 = td_target(r1, next_max, terminal=False)
        t2 = td_target(r2, None, terminal=True)
        assert abs((t1 + t2) - (r1 + r2 + next_max)) < 1e-15

    def test_target_network_syncs_on_period(self):
        params = {"w": np.zeros(2)}
        handle = TargetNetworkHandle(params, sync_period=3)
        live = {"w": np.ones(2)}
        assert not handle.after_update(live)
        assert not handle.after_update(live)
        np.testing.assert_array_equal(handle.params["w"], np.zeros(2))
        assert handle.after_update(live)
        np.testing.assert_array_equal(handle.params["w"], np.ones(2))


class TestSupervisedTraining:
    def _dataset(self, rng, n, k, n_items=60, zero=False):
        users = rng.integers(0, 20, size=n)
        items = np.asarray([rng.choice(n_items, size=k, replace=False) for _ in range(n)])
        clicks = np.zeros((n, k), dtype=np.int8) if zero else (
            rng.random((n, k)) < 0.25
        ).astype(np.int8)
        pools = np.asarray(
            [rng.choice(n_items, size=2 * k, replace=False) for _ in range(n)]
        )
        pools[:, :k] = items
        return {k: (users, items, clicks, pools)}

    def test_zero_click_log_drives_scores_down(self):
        rng = np.random.default_rng(16)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((60, 32))
        gen = make_gen("grnn")
        groups = self._dataset(rng, 300, 5, zero=True)
        train_generator_sl(gen, groups, uf, itf, GenTrainConfig(epochs=40, batch_size=64, seed=1))
        state = DecodeState(user_id=0, pool_ids=tuple(range(8)), prefix=())
        scores = priority_scores(gen, state, uf[0], itf[:8])
        assert scores.mean() < 0.05

    def test_single_list_memorized(self):
        rng = np.random.default_rng(17)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((60, 32))
        gen = make_gen("grnn")
        users = np.asarray([4])
        items = rng.choice(60, size=(1, 4), replace=False)
        clicks = np.asarray([[1, 0, 0, 1]], dtype=np.int8)
        pools = rng.choice(60, size=(1, 8), replace=False)
        pools[0, :4] = items[0]
        groups = {4: (users, items, clicks, pools)}
        curve = train_generator_sl(
            gen, groups, uf, itf, GenTrainConfig(epochs=500, batch_size=1, seed=2)
        )
        assert curve[-1] < 1e-3

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_generator_sl(
                make_gen("mlp"), {}, np.zeros((1, 24)), np.zeros((1, 32)), GenTrainConfig()
            )


class TestQLearning:
    def test_k1_episode_target_is_immediate_reward(self):
        rng = np.random.default_rng(18)
        gen = make_gen("settoseq", head="linear")
        uf, pf = pool_setup(rng, n=4)

        rewards = []

        def rewards_fn(chosen):
            rewards.append(chosen)
            return np.asarray([0.42])

        trs = collect_episode(gen, 0, np.arange(4), 1, uf, pf, rewards_fn, 0.0, rng)
        assert len(trs) == 1 and trs[0].terminal
        assert td_target(trs[0].reward, None, trs[0].terminal) == pytest.approx(0.42)

    def test_planted_optimum_learned(self):
        # an evaluator that only rewards putting the planted item first; the
        # trained greedy decoder should lead with it almost always
        rng = np.random.default_rng(19)
        n_items, n_users = 15, 6
        itf = rng.standard_normal((n_items, 32))
        uf = rng.standard_normal((n_users, 24))
        target_vec = itf[3] / np.linalg.norm(itf[3]) * 4.0
        evaluator = FirstItemEvaluator(target_vec)

        gen = make_gen("settoseq", head="linear", seed=5)
        universe = FakeUniverse(uf, itf, (3,))

        from slateforge.qlearning import simulated_episode_source

        cfg = QLearningConfig(
            episodes=400,
            batch_transitions=96,
            updates_per_episode=1,
            min_fill=200,
            replay_capacity=5000,
            sync_period=50,
            epsilon_start=0.3,
            epsilon_end=0.05,
            seed=3,
        )
        source = simulated_episode_source(gen, evaluator, universe, cfg)
        train_generator_ql(gen, cfg, uf, itf, source)

        hits, total = 0, 0
        for trial in range(100):
            trng = np.random.default_rng(1000 + trial)
            user = int(trng.integers(0, n_users))
            pool = trng.choice(n_items, size=6, replace=False)
            if 3 not in pool:
                continue
            total += 1
            lists = decode(gen, uf[user], itf[pool], 3, Policy("greedy"))
            hits += pool[lists[0][0]] == 3
        assert total >= 20
        assert hits / total >= 0.95
