"""
Tests for the real-time ranker
"""

import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from seqrank.config import RunConfig
from seqrank.datasynth import (
    ACTION_TYPES,
    EPOCH_START,
    SURFACES,
    ActionRecord,
    ActionType,
    Pin,
    PinCatalog,
    Surface,
    generate_world,
)
from seqrank.exceptions import CheckpointError, ConfigError, EmptyInputError, TemporalOrderError
from seqrank.model import TwoTowerModel
from seqrank.numerics import bce_with_logits, constant, float_width, grad_check, mul, reduce_sum
from seqrank.realtime import (
    RankRequest,
    RealtimeConfig,
    RealtimeRanker,
    load_models,
    rank_candidates,
    rank_score,
    ranker_logits,
    realtime_encode,
    realtime_inputs,
    replay_impressions,
    responsiveness,
    time_window_mask,
    train_ranker,
)

REQUEST = EPOCH_START + 100_000


def make_pins(n=24, d_pin=4, n_topics=3):
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(n, d_pin))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return PinCatalog([Pin(i, i % n_topics, vectors[i]) for i in range(n)])


def make_ranker(t_mask=3600.0, seed=0):
    with float_width(64):
        cfg = RealtimeConfig(P=6, t_mask=t_mask, d_pin=4, d_h=8, d_e=4, n_layers=1, n_heads=2, d_ffn=16)
        ranker = RealtimeRanker(cfg, seed=seed)
        rng = np.random.default_rng([seed, 99])
        for param in ranker.params:
            param.data = param.data + rng.normal(0.0, 0.3, size=param.shape)
    return ranker


def small_run_config(**overrides):
    values = {
        'seed': 3, 'n_topics': 3, 'n_pins': 60, 'n_users': 10, 'd_pin': 4, 'horizon_days': 40,
        'M': 8, 'd_h': 8, 'n_heads': 2, 'ranker_heads': 2, 'd_ffn': 16, 'd_e': 4, 'n_layers': 1,
        'P': 6, 'ranker_steps': 4, 'ranker_batch_size': 8, 'ranker_window_days': 10,
        'train_steps': 3, 'batch_size': 4, 'negatives': 10, 'float_width': 64,
    }
    values.update(overrides)
    return RunConfig.resolve(None, values)


class TimeWindowMaskTest(SimpleTestCase):
    def test_boundary_and_monotone(self):
        stamps = np.array([REQUEST - 7200, REQUEST - 3600, REQUEST - 10, REQUEST])
        self.assertEqual(time_window_mask(stamps, REQUEST, 3600).tolist(), [True, True, False, False])
        self.assertEqual(time_window_mask(stamps, REQUEST, 0).tolist(), [True, True, True, True])
        previous = time_window_mask(stamps, REQUEST, 0)
        for t_mask in (1, 60, 3600, 7200, 86400):
            current = time_window_mask(stamps, REQUEST, t_mask)
            self.assertFalse(np.any(current & ~previous))
            previous = current


class RankScoreTest(SimpleTestCase):
    """Scoring and masked-token inertness"""

    def setUp(self):
        self.pins = make_pins()
        self.ranker = make_ranker()
        self.rng = np.random.default_rng(7)

    def random_request(self):
        n = int(self.rng.integers(1, 6))
        ages = np.sort(self.rng.integers(0, 20000, size=n))[::-1]
        actions = [
            ActionRecord(int(self.rng.integers(0, len(self.pins))), REQUEST - int(age),
                         ACTION_TYPES[int(self.rng.integers(0, 6))], float(self.rng.uniform(0, 30)),
                         SURFACES[int(self.rng.integers(0, 3))])
            for age in ages
        ]
        long_term = self.rng.normal(size=4)
        return RankRequest(long_term / np.linalg.norm(long_term), actions,
                           int(self.rng.integers(0, len(self.pins))), REQUEST)

    def score(self, request, t_mask=None):
        with float_width(64):
            return rank_score(request, self.ranker, self.pins, t_mask)

    def test_masked_actions_are_inert(self):
        checked = 0
        for _ in range(100):
            request = self.random_request()
            masked = [i for i, a in enumerate(request.actions) if a.timestamp > REQUEST - 3600]
            if not masked:
                continue
            i = masked[0]
            original = request.actions[i]
            mutated = list(request.actions)
            mutated[i] = ActionRecord(
                (original.pin_id + 5) % len(self.pins),
                min(REQUEST, original.timestamp + 1),
                ActionType.HIDE if original.action_type is not ActionType.HIDE else ActionType.REPIN,
                original.duration + 100.0,
                Surface.SEARCH if original.surface is not Surface.SEARCH else Surface.HOMEFEED,
            )
            mutated.sort(key=lambda a: a.timestamp)
            changed = RankRequest(request.long_term, mutated, request.candidate, REQUEST)
            self.assertEqual(self.score(request), self.score(changed))
            checked += 1
        self.assertGreater(checked, 10)

    def test_visible_actions_move_the_score(self):
        request = self.random_request()
        old = ActionRecord(3, REQUEST - 50_000, ActionType.REPIN, 5.0, Surface.HOMEFEED)
        changed = RankRequest(request.long_term, [old] + list(request.actions), request.candidate, REQUEST)
        self.assertNotEqual(self.score(request), self.score(changed))

    def test_scores_are_probabilities_and_deterministic(self):
        requests = [self.random_request() for _ in range(10)]
        with float_width(64):
            first = self.ranker.score_batch(requests, self.pins)
            second = self.ranker.score_batch(requests, self.pins)
        np.testing.assert_array_equal(first, second)
        self.assertTrue(np.all((first > 0) & (first < 1)))

    def test_request_validation(self):
        late = ActionRecord(1, REQUEST + 5, ActionType.REPIN, 1.0, Surface.HOMEFEED)
        with self.assertRaises(TemporalOrderError):
            self.score(RankRequest(np.ones(4) / 2, [late], 0, REQUEST))
        with self.assertRaises(EmptyInputError):
            self.score(RankRequest(None, [], 0, REQUEST))

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            RealtimeConfig(P=0, t_mask=0, d_pin=4, d_h=8, d_e=4)
        with self.assertRaises(ConfigError):
            RealtimeConfig(P=4, t_mask=-1, d_pin=4, d_h=8, d_e=4)

    def test_save_load(self):
        other = make_ranker(seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            path = self.ranker.save(Path(tmp) / 'ranker.ckpt')
            other.load(path)
        request = self.random_request()
        self.assertEqual(self.score(request), rank_score(request, other, self.pins))


class RankerGradientTest(SimpleTestCase):
    """Finite-difference checks of the ranker in 64-bit"""

    def setUp(self):
        self.ranker = make_ranker()
        cfg = self.ranker.cfg
        rng = np.random.default_rng(11)
        self.features = rng.normal(size=(3, cfg.P, cfg.d_feat))
        self.mask = np.ones((3, cfg.P), dtype=bool)
        self.mask[0, :2] = False
        self.mask[2, :cfg.P - 1] = False
        self.long_term = rng.normal(size=(3, 4))
        self.candidates = rng.normal(size=(3, 4))
        self.labels = np.array([1.0, 0.0, 1.0])
        self.weights = rng.normal(size=(3, cfg.P, cfg.d_h))

    def test_ranker_loss_gradients(self):
        params, cfg = self.ranker.params, self.ranker.cfg

        def loss_fn():
            logits = ranker_logits(self.long_term, self.candidates, self.features, self.mask, params, cfg)
            return bce_with_logits(logits, self.labels)

        with float_width(64):
            report = grad_check(loss_fn, list(params), max_coords=400)
        self.assertTrue(report.passed, report.summary())

    def test_realtime_block_gradients(self):
        params, cfg = self.ranker.params, self.ranker.cfg
        realtime = [p for p in params if p.name.startswith('ranker/realtime')]
        self.assertTrue(realtime)

        def loss_fn():
            return reduce_sum(mul(realtime_encode(self.features, self.mask, params, cfg), constant(self.weights)))

        with float_width(64):
            report = grad_check(loss_fn, realtime)
        self.assertTrue(report.passed, report.summary())


class ResponsivenessTest(SimpleTestCase):
    """Rank gain of a category after one fresh engagement"""

    def setUp(self):
        self.pins = make_pins()
        self.ranked_pins = list(range(12))
        self.context = [ActionRecord(p, REQUEST - 40_000 + 1000 * p, ActionType.REPIN, 5.0, Surface.HOMEFEED)
                        for p in (13, 14)]

    def test_masked_fresh_engagement_gives_zero(self):
        ranker = make_ranker(t_mask=3600.0)
        with float_width(64):
            value = responsiveness(ranker, np.ones(4) / 2, self.context, 1, self.ranked_pins, 16, REQUEST, self.pins)
        self.assertEqual(value, 0.0)

    def test_masked_fresh_engagement_gives_zero_with_full_window(self):
        ranker = make_ranker(t_mask=3600.0)
        context = [ActionRecord(12 + p, REQUEST - 80_000 + 5000 * p, ActionType.REPIN, 5.0, Surface.HOMEFEED)
                   for p in range(8)]
        self.assertGreater(len(context), ranker.cfg.P)
        fresh = ActionRecord(16, REQUEST - 1, ActionType.REPIN, 5.0, Surface.HOMEFEED)
        with float_width(64):
            value = responsiveness(ranker, np.ones(4) / 2, context, 1, self.ranked_pins, 16, REQUEST, self.pins)
            before = rank_score(RankRequest(np.ones(4) / 2, context, 4, REQUEST), ranker, self.pins)
            after = rank_score(RankRequest(np.ones(4) / 2, context + [fresh], 4, REQUEST), ranker, self.pins)
        self.assertEqual(value, 0.0)
        self.assertEqual(before, after)

    def test_masked_actions_do_not_take_slots(self):
        cfg = make_ranker().cfg
        context = [ActionRecord(p, REQUEST - 80_000 + 5000 * p, ActionType.REPIN, 5.0, Surface.HOMEFEED)
                   for p in range(cfg.P)]
        fresh = [ActionRecord(20 + i, REQUEST - 10 * (i + 1), ActionType.CLICK, 30.0, Surface.SEARCH)
                 for i in range(3)][::-1]
        features, mask = realtime_inputs(context, REQUEST, 3600.0, cfg, self.pins)
        crowded, crowded_mask = realtime_inputs(context + fresh, REQUEST, 3600.0, cfg, self.pins)
        self.assertTrue(mask.all())
        np.testing.assert_array_equal(mask, crowded_mask)
        np.testing.assert_array_equal(features, crowded)

    def test_unmasked_ranker_can_respond(self):
        ranker = make_ranker(t_mask=0.0)
        with float_width(64):
            value = responsiveness(ranker, np.ones(4) / 2, self.context, 1, self.ranked_pins, 16, REQUEST, self.pins)
        self.assertTrue(np.isfinite(value))
        self.assertLessEqual(abs(value), len(self.ranked_pins))

    def test_ranked_set_needs_two_categories(self):
        ranker = make_ranker()
        with self.assertRaises(ConfigError):
            responsiveness(ranker, np.ones(4) / 2, self.context, 0, [0, 3, 6], 9, REQUEST, self.pins)


class RankerTrainingTest(SimpleTestCase):
    """Replay, training and serving on a small world"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.cfg = small_run_config()
        with float_width(64):
            cls.world = generate_world(3, n_topics=3, n_pins=60, n_users=10, d_pin=4, horizon_days=40)
            cls.tower = TwoTowerModel.from_run_config(cls.cfg)
            cls.result = train_ranker(cls.world, cls.cfg, cls.tower)

    def test_replay_labels_follow_positive_predicate(self):
        impressions = replay_impressions(self.world.users, 10, 10.0)
        self.assertTrue(impressions)
        for imp in impressions[:50]:
            action = self.world.user(imp.user_id).actions[imp.index]
            self.assertEqual(imp.candidate, action.pin_id)
            self.assertIn(imp.label, (0.0, 1.0))

    def test_training_logs_every_step(self):
        self.assertEqual([step for step, _ in self.result.losses], [1, 2, 3, 4])
        self.assertTrue(all(np.isfinite(loss) for _, loss in self.result.losses))
        heldout_users = {imp.user_id for imp in self.result.heldout_impressions}
        train_users = {imp.user_id for imp in self.result.train_impressions}
        self.assertFalse(heldout_users & train_users)

    def test_shuffled_labels_are_a_permutation(self):
        with float_width(64):
            shuffled = train_ranker(self.world, self.cfg, self.tower, shuffle_labels=True)
        self.assertEqual(shuffled.train_impressions, self.result.train_impressions)
        np.testing.assert_array_equal(self.result.labels, [imp.label for imp in self.result.train_impressions])
        np.testing.assert_array_equal(np.sort(shuffled.labels), np.sort(self.result.labels))
        self.assertFalse(np.array_equal(shuffled.labels, self.result.labels))

    def test_training_is_deterministic(self):
        with float_width(64):
            again = train_ranker(self.world, self.cfg, TwoTowerModel.from_run_config(self.cfg))
        self.assertEqual(again.losses, self.result.losses)

    def test_bad_mask_choices(self):
        with self.assertRaises(ConfigError):
            train_ranker(self.world, self.cfg, self.tower, t_mask_choices=[-5.0])

    def test_rank_candidates_sorted(self):
        user = self.world.users[0]
        with float_width(64):
            ranked = rank_candidates(self.result.ranker, self.tower, self.world, user.user_id,
                                     [5, 1, 9, 30], window_days=10)
        self.assertEqual(sorted(pin for pin, _ in ranked), [1, 5, 9, 30])
        scores = [score for _, score in ranked]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_rank_candidates_errors(self):
        with self.assertRaises(EmptyInputError):
            rank_candidates(self.result.ranker, self.tower, self.world, 999, [1])
        with self.assertRaises(EmptyInputError):
            rank_candidates(self.result.ranker, self.tower, self.world, 0, [10_000])
        with self.assertRaises(EmptyInputError):
            rank_candidates(self.result.ranker, self.tower, self.world, 0, [])

    def test_load_models_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            both = self.result.ranker.save(Path(tmp) / 'both.ckpt', extra=self.tower.params)
            tower_only = self.tower.save(Path(tmp) / 'tower.ckpt')
            tower, ranker = load_models(self.cfg, both)
            with self.assertRaises(CheckpointError):
                load_models(self.cfg, tower_only)
        for name in ranker.params.names():
            np.testing.assert_array_equal(ranker.params[name].data, self.result.ranker.params[name].data)


class RankerLearningTest(SimpleTestCase):
    def test_loss_decreases_over_training(self):
        cfg = small_run_config(ranker_steps=200, ranker_batch_size=32, learning_rate=0.01)
        with float_width(64):
            world = generate_world(3, n_topics=3, n_pins=60, n_users=10, d_pin=4, horizon_days=40)
            result = train_ranker(world, cfg, TwoTowerModel.from_run_config(cfg))
        losses = [loss for _, loss in result.losses]
        self.assertEqual(len(losses), 200)
        self.assertGreater(np.mean(losses[:25]), np.mean(losses[-25:]))
