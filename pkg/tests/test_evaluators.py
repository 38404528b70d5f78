import numpy as np
import pytest

from slateforge import autodiff as ad
from slateforge import metrics
from slateforge.evaluators import (
    DppModel,
    EvaluatorModel,
    TrainConfig,
    assemble_inputs,
    dpp_train,
    eval_forward,
    train_evaluator,
)


RNG = np.random.default_rng(2024)


def random_feats(rng, b, k):
    return rng.standard_normal((b, 24)), rng.standard_normal((b, k, 32))


def make_model(kind, k_max=8, seed=0):
    pos = np.random.default_rng(500 + seed).standard_normal((k_max, 8))
    return EvaluatorModel.create(kind, pos, seed=seed)


class TestForwardContracts:
    def test_outputs_in_unit_interval_and_total_additive(self):
        rng = np.random.default_rng(1)
        for kind in ("mlp", "grnn", "bigrnn", "transformer"):
            model = make_model(kind)
            uf, itf = random_feats(rng, 3, 6)
            per_pos, total = eval_forward(model, uf[0], itf[0])
            assert per_pos.shape == (6,)
            assert np.all((per_pos >= 0) & (per_pos <= 1))
            assert abs(total - per_pos.sum()) < 1e-12

    def test_k_above_table_rejected(self):
        model = make_model("mlp", k_max=4)
        rng = np.random.default_rng(2)
        uf, itf = random_feats(rng, 1, 6)
        with pytest.raises(ValueError, match="K_max"):
            eval_forward(model, uf[0], itf[0])

    def test_mlp_position_independence_bit_exact(self):
        rng = np.random.default_rng(3)
        model = make_model("mlp")
        for _ in range(100):
            uf, itf = random_feats(rng, 1, 6)
            base = model.predict(uf, itf)
            shuffled = itf.copy()
            shuffled[0, [1, 2, 4, 5]] = itf[0, [5, 4, 2, 1]]
            moved = model.predict(uf, shuffled)
            assert moved[0, 0] == base[0, 0]
            assert moved[0, 3] == base[0, 3]

    def test_grnn_suffix_independence_bit_exact(self):
        rng = np.random.default_rng(4)
        model = make_model("grnn")
        for _ in range(100):
            uf, itf = random_feats(rng, 1, 6)
            base = model.predict(uf, itf)
            perturbed = itf.copy()
            perturbed[0, 4:] = rng.standard_normal((2, 32))
            out = model.predict(uf, perturbed)
            np.testing.assert_array_equal(out[0, :4], base[0, :4])

    def test_grnn_prefix_changes_later_scores(self):
        rng = np.random.default_rng(5)
        model = make_model("grnn")
        uf, itf = random_feats(rng, 1, 6)
        base = model.predict(uf, itf)
        perturbed = itf.copy()
        perturbed[0, 0] += 1.0
        out = model.predict(uf, perturbed)
        assert out[0, 3] != base[0, 3]

    @pytest.mark.parametrize("kind", ["bigrnn", "transformer"])
    def test_whole_list_models_see_the_suffix(self, kind):
        rng = np.random.default_rng(6)
        model = make_model(kind)
        hits = 0
        for _ in range(100):
            uf, itf = random_feats(rng, 1, 6)
            base = model.predict(uf, itf)
            perturbed = itf.copy()
            perturbed[0, 5] += rng.standard_normal(32)
            out = model.predict(uf, perturbed)
            hits += out[0, 0] != base[0, 0]
        assert hits == 100


class TestGradients:
    @pytest.mark.parametrize("kind", ["mlp", "grnn", "bigrnn", "transformer"])
    def test_training_loss_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(7)
        pos = rng.standard_normal((4, 8))
        model = EvaluatorModel.create(kind, pos, seed=3, hidden=12)
        uf, itf = random_feats(rng, 2, 4)
        clicks = rng.integers(0, 2, size=(2, 4)).astype(np.float64)
        x = assemble_inputs(uf, itf, model.pos_table)

        def loss_value(params):
            saved = model.params
            model.params = params
            graph = ad.Graph()
            scores = model.forward(graph, x)
            diff = scores - graph.constant(clicks)
            out = float(ad.sumall(diff * diff).values)
            model.params = saved
            return out

        graph = ad.Graph()
        scores = model.forward(graph, x)
        diff = scores - graph.constant(clicks)
        grads = graph.backward(ad.sumall(diff * diff))

        for name, arr in model.params.items():
            for idx in rng.choice(arr.size, size=min(4, arr.size), replace=False):
                p = {k: v.copy() for k, v in model.params.items()}
                h = 1e-5
                p[name].reshape(-1)[idx] += h
                up = loss_value(p)
                p[name].reshape(-1)[idx] -= 2 * h
                down = loss_value(p)
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[idx]
                denom = max(abs(an), abs(fd), 1e-6)
                assert abs(an - fd) / denom < 1e-4, (kind, name, idx, an, fd)


class TestTraining:
    def _dataset(self, rng, n, k, all_zero=False):
        users = rng.integers(0, 20, size=n)
        items = np.asarray([rng.choice(100, size=k, replace=False) for _ in range(n)])
        clicks = np.zeros((n, k), dtype=np.int8)
        if not all_zero:
            clicks = (rng.random((n, k)) < 0.2).astype(np.int8)
        return {k: (users, items, clicks)}

    def test_constant_zero_clicks_drive_outputs_down(self):
        rng = np.random.default_rng(8)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((100, 32))
        model = make_model("mlp")
        groups = self._dataset(rng, 400, 5, all_zero=True)
        train_evaluator(model, groups, uf, itf, TrainConfig(epochs=15, batch_size=128, seed=1))
        users, items, _ = groups[5]
        preds = model.predict(uf[users[:100]], itf[items[:100]])
        assert preds.mean() < 0.05

    def test_single_record_memorized(self):
        rng = np.random.default_rng(9)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((100, 32))
        model = make_model("mlp")
        users = np.asarray([3])
        items = rng.choice(100, size=(1, 5), replace=False)
        clicks = np.asarray([[1, 0, 1, 0, 0]], dtype=np.int8)
        groups = {5: (users, items, clicks)}
        train_evaluator(model, groups, uf, itf, TrainConfig(epochs=500, batch_size=1, seed=2))
        preds = model.predict(uf[users], itf[items[0]][None])
        assert np.mean((preds - clicks) ** 2) < 1e-3

    def test_empty_dataset_rejected(self):
        model = make_model("mlp")
        with pytest.raises(ValueError, match="empty"):
            train_evaluator(model, {}, np.zeros((1, 24)), np.zeros((1, 32)), TrainConfig())

    def test_loss_mostly_non_increasing(self):
        rng = np.random.default_rng(10)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((100, 32))
        model = make_model("grnn")
        groups = self._dataset(rng, 600, 6)
        curve = train_evaluator(
            model, groups, uf, itf, TrainConfig(epochs=10, batch_size=128, seed=3)
        )
        drops = sum(b <= a for a, b in zip(curve, curve[1:]))
        assert drops >= 0.8 * (len(curve) - 1)

    def test_overall_loss_variant_runs(self):
        rng = np.random.default_rng(11)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((100, 32))
        model = make_model("mlp")
        groups = self._dataset(rng, 200, 5)
        curve = train_evaluator(
            model, groups, uf, itf,
            TrainConfig(epochs=3, batch_size=64, loss_kind="overall", seed=4),
        )
        assert len(curve) == 3


def uniform_distances(items):
    b, k = items.shape
    d = np.full((b, k, k), 0.6)
    for i in range(k):
        d[:, i, i] = 0.0
    return d


class TestDpp:
    def test_zero_kernel_gives_certain_empty_subset(self):
        model = DppModel.create(seed=0)
        model.params["embed.w"][:] = 0.0
        model.params["embed.b"][:] = 0.0
        rng = np.random.default_rng(12)
        uf = rng.standard_normal((1, 24))
        itf = rng.standard_normal((1, 4, 32))
        d = uniform_distances(np.zeros((1, 4), dtype=int))
        ll = model.log_likelihood(uf, itf, d, np.zeros((1, 4), dtype=np.int8))
        # det(K_c of empty set) = 1 and det(K + I) = 1 up to jitter
        assert abs(ll) < 1e-4

    def test_scalar_kernel_click_probability(self):
        # 1x1 kernel [k]: P(click) = k / (k + 1)
        model = DppModel.create(seed=0)
        rng = np.random.default_rng(13)
        uf = rng.standard_normal((1, 24))
        itf = rng.standard_normal((1, 1, 32))
        d = np.zeros((1, 1, 1))
        kern = model.kernel_values(uf, itf, d)[0, 0, 0]
        ll = model.log_likelihood(uf, itf, d, np.ones((1, 1), dtype=np.int8))
        assert abs(np.exp(ll) - kern / (kern + 1.0)) < 1e-12

    def test_kernel_symmetric_psd(self):
        model = DppModel.create(seed=1)
        rng = np.random.default_rng(14)
        uf = rng.standard_normal((5, 24))
        itf = rng.standard_normal((5, 6, 32))
        # genuine Jaccard distances over 3-field namespaced tag sets
        fields = rng.integers(0, 4, size=(3, 5, 6))
        eq = sum(
            (f[..., :, None] == f[..., None, :]).astype(int) for f in fields
        )
        d = 1.0 - eq / (6.0 - eq)
        kern = model.kernel_values(uf, itf, d)
        np.testing.assert_allclose(kern, kern.swapaxes(1, 2), atol=1e-12)
        eig = np.linalg.eigvalsh(kern)
        assert eig.min() >= -1e-8
        assert np.all(np.diagonal(kern, axis1=1, axis2=2) > 0)

    def test_likelihood_in_unit_interval(self):
        model = DppModel.create(seed=2)
        rng = np.random.default_rng(15)
        uf = rng.standard_normal((8, 24))
        itf = rng.standard_normal((8, 5, 32))
        d = uniform_distances(np.zeros((8, 5), dtype=int))
        clicks = (rng.random((8, 5)) < 0.4).astype(np.int8)
        ll = model.log_likelihood(uf, itf, d, clicks)
        assert ll <= 0.0

    def test_gradient_check(self):
        rng = np.random.default_rng(16)
        model = DppModel.create(seed=3)
        uf = rng.standard_normal((3, 24))
        itf = rng.standard_normal((3, 4, 32))
        d = uniform_distances(np.zeros((3, 4), dtype=int))
        clicks = np.asarray([[1, 0, 1, 0], [0, 0, 0, 0], [1, 1, 1, 1]], dtype=np.int8)

        def loss_value(params):
            saved = model.params
            model.params = params
            graph = ad.Graph()
            kern = model.kernel(graph, uf, itf, d)
            out = float(model._neg_mean_loglik(graph, kern, clicks).values)
            model.params = saved
            return out

        graph = ad.Graph()
        kern = model.kernel(graph, uf, itf, d)
        grads = graph.backward(model._neg_mean_loglik(graph, kern, clicks))
        for name, arr in model.params.items():
            for idx in range(min(4, arr.size)):
                p = {k: v.copy() for k, v in model.params.items()}
                h = 1e-5
                p[name].reshape(-1)[idx] += h
                up = loss_value(p)
                p[name].reshape(-1)[idx] -= 2 * h
                fd = (up - loss_value(p)) / (2 * h)
                an = grads[name].reshape(-1)[idx]
                assert abs(an - fd) / max(abs(an), abs(fd), 1e-6) < 1e-4

    def test_training_improves_likelihood(self):
        rng = np.random.default_rng(17)
        uf = rng.standard_normal((20, 24))
        itf = rng.standard_normal((60, 32))
        users = rng.integers(0, 20, size=300)
        items = np.asarray([rng.choice(60, size=4, replace=False) for _ in range(300)])
        clicks = (rng.random((300, 4)) < 0.3).astype(np.int8)
        model = DppModel.create(seed=4)
        curve = dpp_train(
            model, {4: (users, items, clicks)}, uf, itf,
            lambda it: uniform_distances(it),
            TrainConfig(epochs=8, batch_size=64, seed=5),
        )
        assert curve[-1] < curve[0]


class TestMetrics:
    def test_auc_perfect_separation(self):
        assert metrics.compute_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_auc_hand_computed_three_quarters(self):
        # 2 pos, 2 neg; one of the four comparison pairs is flipped
        preds = [0.9, 0.2, 0.8, 0.1]
        labels = [1, 1, 0, 0]
        assert metrics.compute_auc(preds, labels) == 0.75

    def test_auc_ties_count_half(self):
        assert metrics.compute_auc([0.5, 0.5], [1, 0]) == 0.5

    def test_auc_random_baseline(self):
        rng = np.random.default_rng(18)
        preds = rng.random(100_000)
        labels = rng.integers(0, 2, size=100_000)
        assert abs(metrics.compute_auc(preds, labels) - 0.5) < 0.01

    def test_auc_single_class_flagged(self):
        with pytest.raises(metrics.MetricUndefinedError):
            metrics.compute_auc([0.1, 0.9], [1, 1])

    def test_seq_metrics_identity(self):
        r = np.asarray([1.0, 3.0, 2.0])
        assert metrics.compute_seq_rmse(r, r) == 0.0
        assert metrics.compute_seq_corr(r, r) == 1.0

    def test_seq_metrics_shift(self):
        r = np.asarray([1.0, 3.0, 2.0])
        assert abs(metrics.compute_seq_rmse(r + 0.5, r) - 0.5) < 1e-12
        assert abs(metrics.compute_seq_corr(r + 0.5, r) - 1.0) < 1e-12

    def test_seq_corr_negation(self):
        r = np.asarray([1.0, 3.0, 2.0])
        assert abs(metrics.compute_seq_corr(-r, r) + 1.0) < 1e-12

    def test_seq_corr_zero_variance_flagged(self):
        with pytest.raises(metrics.MetricUndefinedError):
            metrics.compute_seq_corr([1.0, 1.0], [0.0, 1.0])

    def test_click_correlation_diagonal_is_one(self):
        rng = np.random.default_rng(19)
        clicks = rng.integers(0, 2, size=(500, 6))
        corr = metrics.click_correlation_matrix(clicks)
        np.testing.assert_allclose(np.diag(corr), np.ones(6), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(20)
        model = make_model("transformer")
        uf, itf = random_feats(rng, 40, 6)
        heat = metrics.attention_heatmap(model, uf, itf)
        np.testing.assert_allclose(heat.sum(axis=1), np.ones(6), atol=1e-9)
