import numpy as np
import pytest

from trex.checkpoint import Checkpoint
from trex.data import (
    CategoryVocab,
    CustomerHistory,
    Dataset,
    Session,
    SplitDataset,
)
from trex.evalkit import (
    EvalError,
    RankedBasket,
    evaluate,
    frequency_ranking,
    generate_basket,
    precision_at_k,
    ptop,
    rank_match,
    recall_at_k,
)
from trex.model import ModelConfig, TrexModel

VOCAB = CategoryVocab(("dairy", "produce", "beverages", "bakery", "frozen", "snacks"))


def history(day_cats, cid="c"):
    return CustomerHistory(cid, tuple(Session(d, tuple(cs)) for d, cs in day_cats))


def basket(*ids):
    return RankedBasket(tuple((c, float(len(ids) - i)) for i, c in enumerate(ids)))


# -- independent brute-force oracles -----------------------------------------


def brute_ptop(hist, k):
    counts = {}
    for sess in hist.sessions:
        for c in set(sess.categories):
            counts[c] = counts.get(c, 0) + 1
    order = sorted(counts, key=lambda c: (-counts[c], c))
    return order[:k]


def brute_recall(pred_ids, actual, k):
    hits = sum(1 for c in set(pred_ids[:k]) if c in actual)
    return hits / len(actual)


def brute_precision(pred_ids, actual, k):
    hits = sum(1 for c in set(pred_ids[:k]) if c in actual)
    return hits / k


def random_history(rng, n_cats=6, max_sessions=8, cid="r"):
    n_sess = int(rng.integers(1, max_sessions + 1))
    days = np.sort(rng.choice(200, size=n_sess, replace=False))
    sessions = []
    for d in days:
        size = int(rng.integers(1, n_cats + 1))
        cats = tuple(sorted(rng.choice(n_cats, size=size, replace=False).tolist()))
        sessions.append(Session(int(d), cats))
    return CustomerHistory(cid, tuple(sessions))


# -----------------------------------------------------------------------------


class TestRankedBasket:
    def test_rejects_duplicates(self):
        with pytest.raises(EvalError):
            RankedBasket(((1, 0.9), (1, 0.8)))

    def test_rejects_increasing_scores(self):
        with pytest.raises(EvalError):
            RankedBasket(((1, 0.5), (2, 0.9)))


class TestPtop:
    def test_frequency_order_from_paper_style_history(self):
        # dairy in 3 sessions, produce in 2, beverages in 1
        h = history([(0, {0, 1, 2}), (5, {0, 1}), (9, {0})])
        assert ptop(h, 3).ids() == (0, 1, 2)

    def test_fewer_distinct_than_k(self):
        h = history([(0, {3})])
        assert ptop(h, 5).ids() == (3,)

    def test_tie_breaks_by_ascending_id(self):
        # A=1 and B=4 tie on 3 sessions, C=2 has 1
        h = history([(0, {1, 4}), (3, {1, 4, 2}), (8, {1, 4})])
        assert ptop(h, 2).ids() == (1, 4)

    def test_scores_are_session_counts(self):
        h = history([(0, {0}), (2, {0, 1}), (7, {0})])
        assert ptop(h, 2).items == ((0, 3.0), (1, 1.0))

    def test_presence_not_multiplicity(self):
        # duplicate mentions inside one session collapse before counting
        h = CustomerHistory("c", (Session(0, (2, 2, 2)), Session(1, (1,))))
        assert ptop(h, 2).ids() == (1, 2)

    def test_empty_history_rejected(self):
        with pytest.raises(EvalError):
            ptop(CustomerHistory("c", ()), 3)

    def test_matches_brute_force_on_random_histories(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            h = random_history(rng)
            k = int(rng.integers(1, 8))
            assert list(ptop(h, k).ids()) == brute_ptop(h, k)


class TestRecallPrecision:
    def test_recall_perfect_retrieval(self):
        assert recall_at_k(basket(0, 1, 2), {0, 1, 2}, 3) == 1.0

    def test_recall_partial(self):
        assert recall_at_k(basket(0, 1, 2), {0, 3}, 3) == 0.5

    def test_recall_disjoint(self):
        assert recall_at_k(basket(0, 1, 2), {4, 5}, 3) == 0.0

    def test_recall_rejects_empty_actual(self):
        with pytest.raises(EvalError):
            recall_at_k(basket(0), set(), 1)

    def test_precision_partial(self):
        assert precision_at_k(basket(0, 1, 2), {0, 3}, 3) == pytest.approx(1 / 3)

    def test_precision_divides_by_k_for_short_lists(self):
        assert precision_at_k(basket(0), {0}, 2) == 0.5

    def test_precision_disjoint(self):
        assert precision_at_k(basket(0, 1, 2), {4, 5}, 3) == 0.0

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            n_pred = int(rng.integers(1, 7))
            pred_ids = rng.choice(10, size=n_pred, replace=False).tolist()
            pred = RankedBasket(
                tuple((int(c), float(n_pred - i)) for i, c in enumerate(pred_ids))
            )
            actual = set(rng.choice(10, size=int(rng.integers(1, 6)), replace=False).tolist())
            k = int(rng.integers(1, 9))
            assert recall_at_k(pred, actual, k) == brute_recall(pred_ids, actual, k)
            assert precision_at_k(pred, actual, k) == brute_precision(pred_ids, actual, k)


class TestRankMatch:
    def test_identical_order_is_diagonal(self):
        h = history([(0, {0, 1, 2}), (3, {0, 1}), (9, {0})])
        result = rank_match(h, basket(0, 1, 2), depth=3)
        assert result.pairs == ((1, 1), (2, 2), (3, 3))
        assert result.misses == 0

    def test_swapped_pair(self):
        h = history([(0, {0, 1}), (3, {0})])  # true order: 0 then 1
        result = rank_match(h, basket(1, 0), depth=2)
        assert result.pairs == ((1, 2), (2, 1))

    def test_missing_category_recorded(self):
        h = history([(0, {0, 1}), (3, {0})])
        result = rank_match(h, basket(0), depth=2)
        assert result.pairs == ((1, 1),)
        assert result.misses == 1

    def test_mass_plus_misses_accounting(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            h = random_history(rng)
            distinct = len(frequency_ranking(h))
            n_pred = int(rng.integers(1, 7))
            pred_ids = rng.choice(6, size=min(n_pred, 6), replace=False).tolist()
            pred = RankedBasket(
                tuple((int(c), float(9 - i)) for i, c in enumerate(pred_ids))
            )
            depth = 4
            result = rank_match(h, pred, depth)
            assert len(result.pairs) + result.misses == min(depth, distinct)


def tiny_ckpt(seed=0, vocab=VOCAB):
    cfg = ModelConfig(
        vocab_size=vocab.size,
        embed_dim=8,
        num_heads=2,
        num_encoder_layers=1,
        num_decoder_layers=1,
        ffn_dim=12,
        dropout_rate=0.0,
        clip_days=30,
        n_enc=8,
        n_dec=4,
    )
    model = TrexModel(cfg, seed=seed)
    return Checkpoint(cfg, model.params, vocab, metadata={})


class TestGenerateBasket:
    def test_modes_agree_exactly_at_k_one(self):
        rng = np.random.default_rng(3)
        for seed in range(20):
            ckpt = tiny_ckpt(seed)
            h = random_history(rng, cid=f"r{seed}")
            one = generate_basket(ckpt, h, 1, mode="one_shot")
            auto = generate_basket(ckpt, h, 1, mode="autoregressive")
            assert one.items == auto.items

    def test_no_specials_or_duplicates_over_random_models(self):
        rng = np.random.default_rng(4)
        generations = 0
        for seed in range(100):
            ckpt = tiny_ckpt(seed)
            for j in range(10):
                h = random_history(rng, cid=f"r{seed}.{j}")
                mode = "autoregressive" if j % 2 else "one_shot"
                out = generate_basket(ckpt, h, 3, mode=mode)
                ids = out.ids()
                assert len(set(ids)) == len(ids)
                assert all(0 <= c < VOCAB.num_real for c in ids)
                generations += 1
        assert generations == 1000

    def test_k_larger_than_vocab_rejected(self):
        ckpt = tiny_ckpt()
        h = history([(0, {0}), (5, {1})])
        with pytest.raises(EvalError):
            generate_basket(ckpt, h, VOCAB.num_real + 1)

    def test_prefix_categories_never_rerecommended(self):
        ckpt = tiny_ckpt(7)
        h = history([(0, {0, 1, 2}), (5, {3, 4})])
        out = generate_basket(ckpt, h, 3, mode="autoregressive", prefix=(2, 5))
        assert not {2, 5} & set(out.ids())

    def test_unknown_prefix_rejected(self):
        ckpt = tiny_ckpt()
        h = history([(0, {0}), (5, {1})])
        with pytest.raises(EvalError):
            generate_basket(ckpt, h, 2, prefix=(99,))

    def test_autoregressive_scores_non_increasing(self):
        ckpt = tiny_ckpt(9)
        h = history([(0, {0, 1}), (4, {2, 3}), (9, {0, 5})])
        out = generate_basket(ckpt, h, 4, mode="autoregressive")
        scores = [s for _, s in out.items]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


def frequency_split(n_customers=12, seed=5):
    """Customers with planted per-category inclusion probabilities."""
    rng = np.random.default_rng(seed)
    customers = []
    for i in range(n_customers):
        liked = rng.choice(6, size=2, replace=False)
        probs = np.full(6, 0.1)
        probs[liked] = 0.9
        sessions = []
        day = 0
        for _ in range(6):
            cats = np.flatnonzero(rng.random(6) < probs)
            if cats.size == 0:
                cats = liked[:1]
            sessions.append(Session(day, tuple(sorted(int(c) for c in cats))))
            day += int(rng.integers(1, 9))
        customers.append(CustomerHistory(f"c{i:03d}", tuple(sessions)))
    ds = Dataset(VOCAB, customers)
    histories = [c.drop_last_session() for c in ds.customers]
    return SplitDataset(
        train=Dataset(VOCAB, histories),
        validation=Dataset(VOCAB, []),
        test_pairs=[(h, c.sessions[-1]) for h, c in zip(histories, ds.customers)],
    )


class TestEvaluate:
    def test_oracle_system_gets_perfect_scores(self):
        split = frequency_split()

        def oracle(hist, k):
            target = next(t for h, t in split.test_pairs if h.customer_id == hist.customer_id)
            ranking = [c for c in frequency_ranking(hist) if c in target.category_set]
            ranking += [c for c in target.categories if c not in ranking]
            return RankedBasket(tuple((c, float(len(ranking) - i)) for i, c in enumerate(ranking)))

        report = evaluate(oracle, split, system="oracle", ks=(2, 3), rank_depth=3)
        for history_, target in split.test_pairs:
            pred = oracle(history_, 10)
            assert recall_at_k(pred, target.category_set, len(target.categories)) == 1.0

    def test_ptop_matches_independent_frequency_oracle(self):
        split = frequency_split()
        report = evaluate(ptop, split, system="ptop", ks=(2, 3, 4), rank_depth=4)
        for k_metrics in report.per_k:
            k = k_metrics.k
            recalls = []
            for hist, target in sorted(split.test_pairs, key=lambda p: p[0].customer_id):
                pred_ids = brute_ptop(hist, k)
                recalls.append(brute_recall(pred_ids, target.category_set, k))
            assert k_metrics.recall_mean == pytest.approx(float(np.mean(recalls)), abs=0.0)

    def test_single_customer_quartiles_collapse(self):
        split = frequency_split(n_customers=2)
        split.test_pairs = split.test_pairs[:1]
        report = evaluate(ptop, split, system="ptop", ks=(3,), rank_depth=3)
        m = report.per_k[0]
        assert m.recall_q25 == m.recall_median == m.recall_q75

    def test_ptop_rank_match_is_diagonal(self):
        split = frequency_split()
        report = evaluate(ptop, split, system="ptop", ks=(3,), rank_depth=4)
        off_diag = report.rank_matrix.sum() - np.trace(report.rank_matrix)
        assert off_diag == 0
        assert report.exact_match_fraction == 1.0

    def test_bucket_counts_cover_all_customers(self):
        split = frequency_split()
        report = evaluate(ptop, split, system="ptop", ks=(3,), rank_depth=3)
        assert sum(b.count for b in report.tenure_buckets) == report.num_customers
        assert sum(b.count for b in report.basket_size_buckets) == report.num_customers

    def test_report_dict_is_json_friendly(self):
        import json

        split = frequency_split(n_customers=4)
        report = evaluate(ptop, split, system="ptop", ks=(2, 3), rank_depth=3)
        encoded = json.dumps(report.to_dict(), sort_keys=True)
        assert "rank_matrix" in encoded
