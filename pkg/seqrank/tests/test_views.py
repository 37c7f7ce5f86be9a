"""
Tests for the JSON endpoints
"""

import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.test import Client, SimpleTestCase, override_settings

from seqrank.views import serving_state
from .test_commands import SMALL_MODEL, SMALL_WORLD


class IndexAndPlanTest(SimpleTestCase):
    def setUp(self):
        self.client = Client()

    def test_index(self):
        response = self.client.get('/api/')
        self.assertEqual(response.status_code, 200)
        data = json.loads(response.content)
        self.assertIn('message', data)
        self.assertEqual(len(data['endpoints']), 2)

    def test_named_plans(self):
        response = self.client.get('/api/plan/')
        self.assertEqual(response.status_code, 200)
        plans = {row['name']: row for row in response.json()['plans']}
        self.assertEqual(plans['e']['latency_us'], 1100.0)
        self.assertIsNone(plans['a']['increase_pct'])
        self.assertEqual(plans['b']['increase_pct'], 400.0)

    def test_search(self):
        data = self.client.get('/api/plan/', {'mode': 'search'}).json()
        self.assertEqual(data['search'], 'exhaustive')
        self.assertEqual(data['latency_us'], 1100.0)
        self.assertEqual(data['placement']['transformer'], 'gpu')
        self.assertEqual(data['placement']['preprocess'], 'cpu')

    def test_transfer_parameters(self):
        data = self.client.get('/api/plan/', {'overhead': '0', 'bw': '1e9'}).json()
        plans = {row['name']: row for row in data['plans']}
        self.assertAlmostEqual(plans['a']['latency_us'], 1000.0, places=3)
        self.assertAlmostEqual(plans['e']['latency_us'], 1020.0, places=3)

    def test_bad_requests(self):
        self.assertEqual(self.client.get('/api/plan/', {'mode': 'fastest'}).status_code, 400)
        self.assertEqual(self.client.get('/api/plan/', {'bw': '0'}).status_code, 400)
        self.assertEqual(self.client.get('/api/plan/', {'overhead': 'lots'}).status_code, 400)
        self.assertEqual(self.client.post('/api/plan/').status_code, 405)

    def test_unexpected_failure_is_a_json_500(self):
        with mock.patch('seqrank.views.parse_graph', side_effect=KeyError('transformer')), \
                self.assertLogs('seqrank.views', level='ERROR'):
            response = self.client.get('/api/plan/')
        self.assertEqual(response.status_code, 500)
        self.assertEqual(response.json(), {'error': "'transformer'"})


class RankViewTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.corpus = cls.tmp / 'corpus'
        cls.out = cls.tmp / 'run'
        quiet = {'stdout': StringIO(), 'stderr': StringIO()}
        call_command('synth', '--corpus_dir', str(cls.corpus), *SMALL_WORLD, **quiet)
        call_command('train', '--corpus_dir', str(cls.corpus), '--out', str(cls.out), '--train_ranker', 'true',
                     *SMALL_WORLD, *SMALL_MODEL, **quiet)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        serving_state.cache_clear()
        super().tearDownClass()

    def setUp(self):
        self.client = Client()
        self.configured = override_settings(SEQRANK_SERVING_CHECKPOINT=str(self.out / 'model.ckpt'),
                                            SEQRANK_SERVING_CORPUS=str(self.corpus))

    def post(self, body):
        return self.client.post('/api/rank/', json.dumps(body), content_type='application/json')

    @override_settings(SEQRANK_SERVING_CHECKPOINT='', SEQRANK_SERVING_CORPUS='')
    def test_unconfigured(self):
        self.assertEqual(self.post({'user_id': 0, 'candidates': [1]}).status_code, 503)

    def test_ranks_candidates(self):
        with self.configured:
            response = self.post({'user_id': 0, 'candidates': [5, 1, 9, 30]})
        self.assertEqual(response.status_code, 200)
        data = response.json()
        self.assertEqual(data['user_id'], 0)
        self.assertEqual(sorted(row['pin_id'] for row in data['ranked']), [1, 5, 9, 30])
        scores = [row['score'] for row in data['ranked']]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_explicit_mask_matches_configured_default(self):
        with self.configured:
            first = self.post({'user_id': 1, 'candidates': [2, 3, 4]}).json()
            again = self.post({'user_id': 1, 'candidates': [2, 3, 4], 'tmask': 3600}).json()
        self.assertEqual(first, again)

    def test_bad_bodies(self):
        with self.configured:
            self.assertEqual(self.post({'candidates': [1]}).status_code, 400)
            self.assertEqual(self.post({'user_id': 'x', 'candidates': [1]}).status_code, 400)
            self.assertEqual(self.post({'user_id': 999, 'candidates': [1]}).status_code, 400)
            self.assertEqual(self.post({'user_id': 0, 'candidates': []}).status_code, 400)
            self.assertEqual(self.client.get('/api/rank/').status_code, 405)

    def test_unexpected_failure_is_a_json_500(self):
        with self.configured, mock.patch('seqrank.views.rank_candidates', side_effect=RuntimeError('boom')), \
                self.assertLogs('seqrank.views', level='ERROR'):
            response = self.post({'user_id': 0, 'candidates': [1]})
        self.assertEqual(response.status_code, 500)
        self.assertEqual(response.json(), {'error': 'boom'})

    def test_missing_checkpoint(self):
        with override_settings(SEQRANK_SERVING_CHECKPOINT=str(self.tmp / 'nope.ckpt'),
                               SEQRANK_SERVING_CORPUS=str(self.corpus)):
            self.assertEqual(self.post({'user_id': 0, 'candidates': [1]}).status_code, 503)
