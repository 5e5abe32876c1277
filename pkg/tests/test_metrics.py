import numpy as np
import pytest

from diffrec.data import InteractionDataset, synth_generate
from diffrec.inference import InferenceConfig
from diffrec.metrics import (evaluate_model, evaluate_scores, hr_at_k, ndcg_at_k,
                             popularity_scores, rank_of_target)
from diffrec.model import DsrConfig, init_params
from diffrec.rng import RngStreams
from diffrec.schedule import make_schedule


class TestRankOfTarget:
    def test_one_hot_is_first(self):
        probs = np.zeros(10)
        probs[7] = 1.0
        assert rank_of_target(probs, 7) == 1

    def test_uniform_smallest_real_id_wins(self):
        probs = np.full(10, 0.1)
        assert rank_of_target(probs, 2) == 1
        assert rank_of_target(probs, 3) == 2

    def test_matches_full_sort_oracle(self, rng):
        probs = rng.random(50)
        probs[11] = probs[23]
        order = sorted(range(2, 50), key=lambda i: (-probs[i], i))
        for target in (2, 11, 23, 49):
            assert rank_of_target(probs, target) == order.index(target) + 1

    def test_reserved_target_rejected(self):
        with pytest.raises(ValueError):
            rank_of_target(np.full(5, 0.2), 0)

    def test_excluded_target_rejected(self):
        with pytest.raises(ValueError):
            rank_of_target(np.full(5, 0.2), 3, exclusions={3})

    def test_exclusions_shrink_ranks(self, rng):
        probs = rng.random(20)
        base = rank_of_target(probs, 9)
        better = [i for i in range(2, 20) if i != 9 and probs[i] > probs[9]]
        if better:
            excluded = rank_of_target(probs, 9, exclusions=set(better))
            assert excluded < base


class TestPointMetrics:
    def test_rank_one_is_perfect(self):
        assert hr_at_k(1, 5) == 1.0
        assert ndcg_at_k(1, 5) == 1.0

    def test_rank_three_at_ten(self):
        assert ndcg_at_k(3, 10) == pytest.approx(0.5)

    def test_miss_scores_zero(self):
        assert hr_at_k(11, 10) == 0.0
        assert ndcg_at_k(11, 10) == 0.0


def _toy_dataset():
    # three users, last item is the test target, second-to-last validation
    return InteractionDataset(
        sequences=[[2, 3, 4, 5, 6], [3, 4, 5, 2, 6], [4, 5, 2, 3, 6]],
        user_ids=["a", "b", "c"],
        item_ids=["ia", "ib", "ic", "id", "ie"],
    )


class TestEvaluateScores:
    def test_degenerate_popularity_hits(self):
        # every user's test target is 6; force it to dominate the scores
        ds = _toy_dataset()
        scores = np.zeros(ds.vocab_size)
        scores[6] = 100.0
        report = evaluate_scores(ds, "test", scores)
        assert report.hr[5] == 1.0 and report.ndcg[5] == 1.0

    def test_splits_pick_distinct_targets(self):
        ds = _toy_dataset()
        scores = np.arange(ds.vocab_size, dtype=float)
        valid = evaluate_scores(ds, "valid", scores, keep_ranks=True)
        test = evaluate_scores(ds, "test", scores, keep_ranks=True)
        assert not np.array_equal(valid.ranks, test.ranks)

    def test_uniform_scores_match_analytic_hit_rate(self):
        # constant scores rank by id; with uniform targets HR@10 ~ 10 / |V|
        ds = synth_generate(2000, 100, sharpness=0.0, seed=5)
        report = evaluate_scores(ds, "test", np.zeros(ds.vocab_size))
        se = np.sqrt(0.1 * 0.9 / 2000)
        assert report.hr[10] == pytest.approx(0.1, abs=3 * se)

    def test_popularity_counts_training_prefix_only(self):
        ds = _toy_dataset()
        scores = popularity_scores(ds)
        assert scores.sum() == sum(len(s) - 2 for s in ds.sequences)
        assert scores[0] == 0 and scores[1] == 0


class TestEvaluateModel:
    def _setup(self):
        cfg = DsrConfig(dim=8, seq_len=6, layers=1, heads=2, dropout=0.0, steps=5,
                        schedule="sqrt")
        ds = synth_generate(60, 20, 5.0, seed=3, min_len=5, max_len=10)
        params = init_params(cfg, ds.vocab_size, RngStreams(2).get("init"))
        table = make_schedule(cfg.schedule, cfg.steps)
        return ds, params, table

    def test_metric_nesting_and_bounds(self):
        ds, params, table = self._setup()
        report = evaluate_model(ds, "test", params, table, InferenceConfig(seeds=(0, 1)))
        assert report.hr[5] <= report.hr[10] <= report.hr[20]
        assert report.ndcg[5] <= report.ndcg[10] <= report.ndcg[20]
        for k in (5, 10, 20):
            assert 0.0 <= report.ndcg[k] <= report.hr[k] <= 1.0
        assert report.users == ds.num_users

    def test_batch_size_does_not_change_report(self):
        ds, params, table = self._setup()
        cfg = InferenceConfig(seeds=(0, 1, 2))
        a = evaluate_model(ds, "test", params, table, cfg, batch_size=7)
        b = evaluate_model(ds, "test", params, table, cfg, batch_size=64)
        assert a.as_dict() == b.as_dict()

    def test_per_user_ndcg_bounded_by_hit(self):
        ds, params, table = self._setup()
        report = evaluate_model(ds, "test", params, table,
                                InferenceConfig(seeds=(0,)), keep_ranks=True)
        for rank in report.ranks:
            for k in (5, 10, 20):
                assert ndcg_at_k(rank, k) <= hr_at_k(rank, k)

    def test_full_chain_mode_runs(self):
        ds, params, table = self._setup()
        small = InteractionDataset(sequences=ds.sequences[:5],
                                   user_ids=ds.user_ids[:5], item_ids=ds.item_ids)
        report = evaluate_model(small, "valid", params, table,
                                InferenceConfig(mode="full_chain", seeds=(4,)))
        assert 0.0 <= report.hr[20] <= 1.0

    def test_modes_agree_at_single_step_single_seed(self):
        import dataclasses
        ds, params, _ = self._setup()
        cfg = dataclasses.replace(params.config, steps=2)
        full = make_schedule("sqrt", 2)
        table = dataclasses.replace(
            full, steps=1, beta=full.beta[:2], alpha=full.alpha[:2],
            alpha_bar=full.alpha_bar[:2], beta_tilde=full.beta_tilde[:2],
            coef_clean=full.coef_clean[:2], coef_noisy=full.coef_noisy[:2])
        small = InteractionDataset(sequences=ds.sequences[:8],
                                   user_ids=ds.user_ids[:8], item_ids=ds.item_ids)
        eff = evaluate_model(small, "test", params, table, InferenceConfig(seeds=(3,)))
        chain = evaluate_model(small, "test", params, table,
                               InferenceConfig(mode="full_chain", seeds=(3,)))
        assert eff.as_dict() == chain.as_dict()

    def test_empty_split_rejected(self):
        ds, params, table = self._setup()
        empty = InteractionDataset(sequences=[], user_ids=[], item_ids=ds.item_ids)
        with pytest.raises(ValueError):
            evaluate_model(empty, "test", params, table, InferenceConfig(seeds=(0,)))
