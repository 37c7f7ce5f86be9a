"""
Tests for recall@k, AUC and the comparison harnesses
"""

import numpy as np
from django.test import SimpleTestCase

from seqrank.config import RunConfig
from seqrank.datasynth import generate_world, partition_users
from seqrank.evaluation import (
    EvalReport,
    PinIndex,
    auc,
    compare_losses,
    compare_time_masks,
    mean_embedding_recall,
    recall_at_k,
    recall_at_ks,
)
from seqrank.exceptions import ConfigError, EmptyInputError, UndefinedMetricError


def five_pin_index():
    vectors = np.array([
        [1.0, 0.0],
        [0.8, 0.6],
        [0.0, 1.0],
        [-1.0, 0.0],
        [0.6, -0.8],
    ])
    return PinIndex(np.arange(10, 15), vectors)


class RecallTest(SimpleTestCase):
    def setUp(self):
        self.index = five_pin_index()
        self.query = np.array([1.0, 0.0])

    def test_ranked_order(self):
        # scores 1.0, 0.8, 0.0, -1.0, 0.6
        self.assertEqual(self.index.ranked(self.query).tolist(), [10, 11, 14, 12, 13])

    def test_ties_break_by_id(self):
        index = PinIndex(np.array([7, 3, 5]), np.array([[1.0], [1.0], [0.5]]))
        self.assertEqual(index.ranked(np.array([1.0])).tolist(), [3, 7, 5])

    def test_hand_computed_values(self):
        self.assertEqual(recall_at_k(self.query, [10], self.index, 1), 1.0)
        self.assertEqual(recall_at_k(self.query, [12], self.index, 1), 0.0)
        self.assertEqual(recall_at_k(self.query, [11, 12], self.index, 2), 0.5)
        self.assertEqual(recall_at_k(self.query, [11, 12], self.index, 4), 1.0)
        # duplicates count once
        self.assertEqual(recall_at_k(self.query, [12, 12, 13], self.index, 3), 0.0)

    def test_k_at_least_corpus_size_is_one(self):
        self.assertEqual(recall_at_k(self.query, [13, 12], self.index, 5), 1.0)
        self.assertEqual(recall_at_k(self.query, [13], self.index, 50), 1.0)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        index = PinIndex(np.arange(60), rng.normal(size=(60, 4)))
        for _ in range(20):
            query = rng.normal(size=4)
            positives = rng.choice(60, size=5, replace=False)
            values = recall_at_ks(query, positives, index, [1, 2, 5, 10, 30, 60])
            hits = [values[k] * min(k, 5) for k in sorted(values)]
            self.assertEqual(hits, sorted(hits))
            self.assertEqual(values[60], 1.0)

    def test_errors(self):
        with self.assertRaises(UndefinedMetricError):
            recall_at_k(self.query, [], self.index, 3)
        with self.assertRaises(ConfigError):
            recall_at_k(self.query, [10], self.index, 0)
        with self.assertRaises(EmptyInputError):
            PinIndex(np.array([], dtype=np.int64), np.zeros((0, 2)))


class AucTest(SimpleTestCase):
    def test_hand_computed(self):
        self.assertEqual(auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]), 0.75)
        self.assertEqual(auc([0.1, 0.9], [0, 1]), 1.0)
        self.assertEqual(auc([0.9, 0.1], [0, 1]), 0.0)

    def test_ties_count_half(self):
        self.assertEqual(auc([0.5, 0.5], [1, 0]), 0.5)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(0.01, 0.99, size=200)
        labels = rng.integers(0, 2, size=200)
        base = auc(scores, labels)
        self.assertAlmostEqual(auc(np.log(scores / (1 - scores)), labels), base, places=12)
        self.assertAlmostEqual(auc(scores ** 3, labels), base, places=12)

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(5)
        scores = rng.integers(0, 10, size=60).astype(float)
        labels = rng.integers(0, 2, size=60)
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        self.assertAlmostEqual(auc(scores, labels), pairs / (len(pos) * len(neg)), places=12)

    def test_single_class_is_undefined(self):
        with self.assertRaises(UndefinedMetricError):
            auc([0.2, 0.4], [1, 1])
        with self.assertRaises(UndefinedMetricError):
            auc([0.2, 0.4], [0, 0])


class EvalReportTest(SimpleTestCase):
    def setUp(self):
        self.report = EvalReport(seeds=[1, 2])
        self.report.add('recall@10', 'next_action', 1, 0.25)
        self.report.add('recall@10', 'next_action', 2, 0.75)
        self.report.add('recall@10', 'dense_all_action', 1, 0.5)

    def test_machine_lines(self):
        self.assertEqual(self.report.machine_lines().splitlines(), [
            'recall@10,next_action,1,0.250000',
            'recall@10,next_action,2,0.750000',
            'recall@10,dense_all_action,1,0.500000',
        ])

    def test_summary(self):
        self.assertEqual(self.report.summary()[('recall@10', 'next_action')], (0.5, 0.25, 0.75))
        self.assertEqual(self.report.values('recall@10', 'next_action'), {1: 0.25, 2: 0.75})

    def test_table_lists_failures(self):
        self.report.fail('all_action', 2, 'non-finite loss at step 3')
        table = self.report.render_table()
        self.assertIn('FAILED all_action seed=2: non-finite loss at step 3', table)
        self.assertIn('seeds: 1,2', table)
        self.assertTrue(self.report.render().endswith('recall@10,dense_all_action,1,0.500000\n'))

    def test_empty(self):
        self.assertEqual(EvalReport().render_table(), 'no results\n')


class ReferencePredictorTest(SimpleTestCase):
    def test_single_topic_beats_chance(self):
        cfg = RunConfig.resolve(None, {'n_topics': 1, 'n_pins': 40, 'n_users': 20, 'd_pin': 4,
                                       'horizon_days': 60, 'M': 16, 'holdout_fraction': 0.5})
        world = generate_world(1, n_topics=1, n_pins=40, n_users=20, d_pin=4, horizon_days=60)
        _, heldout = partition_users(world.users, 0.5)
        values = mean_embedding_recall(world, heldout, cfg, [1, 10])
        self.assertGreater(values[1], 1.0 / 40)
        self.assertGreaterEqual(values[10], values[1])


class ComparisonHarnessTest(SimpleTestCase):
    def setUp(self):
        self.cfg = RunConfig.resolve(None, {
            'n_topics': 3, 'n_pins': 40, 'n_users': 10, 'd_pin': 4, 'horizon_days': 40, 'M': 8,
            'd_h': 8, 'd_ffn': 16, 'd_e': 4, 'n_layers': 1, 'train_steps': 2, 'batch_size': 4,
            'negatives': 8, 'P': 4, 'ranker_steps': 2, 'ranker_batch_size': 4, 'ranker_window_days': 7,
            'eval_window_days': 7, 'recall_ks': '1,10', 'holdout_fraction': 0.3, 'float_width': 64,
        })

    def test_needs_three_seeds(self):
        with self.assertRaises(ConfigError):
            compare_losses(self.cfg, [1, 2])
        with self.assertRaises(ConfigError):
            compare_time_masks(self.cfg, [1])

    def test_compare_losses_rows(self):
        report = compare_losses(self.cfg, [1, 2, 3], kinds=['next_action'])
        models = {model for _, model, _, _ in report.rows}
        self.assertEqual(models, {'next_action', 'mean_embedding'})
        self.assertEqual(len(report.values('recall@10', 'next_action')), 3)
        self.assertTrue(all(0.0 <= value <= 1.0 for *_, value in report.rows))
        again = compare_losses(self.cfg, [1, 2, 3], kinds=['next_action'])
        self.assertEqual(again.rows, report.rows)
