"""
Tests for the seqrank management commands
"""

import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command, execute_from_command_line
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from seqrank.checkpoint import load_checkpoint
from seqrank.config import RunConfig
from seqrank.management.commands.rank import read_candidates

SMALL_WORLD = [
    '--seed', '3', '--topics', '3', '--pins', '60', '--users', '10', '--d_pin', '4',
    '--horizon_days', '40',
]
SMALL_MODEL = [
    '--M', '8', '--d_h', '8', '--d_ffn', '16', '--d_e', '4', '--n_layers', '1', '--P', '6',
    '--steps', '3', '--batch_size', '4', '--negatives', '10', '--ranker_steps', '3',
    '--ranker_batch_size', '8', '--ranker_window_days', '10', '--eval_window_days', '7',
    '--recall_ks', '1,10', '--float_width', '64',
]


def run(*args):
    out = StringIO()
    call_command(*args, stdout=out, stderr=StringIO())
    return out.getvalue()


class CommandTestCase(SimpleTestCase):
    """Synthesizes a small corpus and trains tower + ranker once for the class"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.corpus = cls.tmp / 'corpus'
        cls.out = cls.tmp / 'run'
        cls.synth_output = run('synth', '--corpus_dir', str(cls.corpus), *SMALL_WORLD)
        cls.train_output = run('train', '--corpus_dir', str(cls.corpus), '--out', str(cls.out),
                               '--train_ranker', 'true', *SMALL_WORLD, *SMALL_MODEL)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def model_args(self):
        return ['--corpus_dir', str(self.corpus), '--out', str(self.out), *SMALL_WORLD, *SMALL_MODEL]


class SynthCommandTest(CommandTestCase):
    def test_writes_corpus_files(self):
        for name in ('corpus.jsonl', 'pins.jsonl', 'users.jsonl', 'FEATURES.md', 'run.cfg'):
            self.assertTrue((self.corpus / name).exists(), name)
        self.assertIn('Generated 60 pins, 10 users', self.synth_output)

    def test_same_seed_same_digest(self):
        again = self.tmp / 'corpus_again'
        output = run('synth', '--corpus_dir', str(again), *SMALL_WORLD)
        digest = [line for line in self.synth_output.splitlines() if line.startswith('digest:')]
        self.assertEqual(digest, [line for line in output.splitlines() if line.startswith('digest:')])
        self.assertEqual((again / 'corpus.jsonl').read_bytes(), (self.corpus / 'corpus.jsonl').read_bytes())

    def test_run_cfg_replays(self):
        cfg = RunConfig.resolve(self.corpus / 'run.cfg')
        self.assertEqual((cfg['n_pins'], cfg['n_users'], cfg['seed']), (60, 10, 3))

    def test_invalid_config_exits_with_status_one(self):
        with self.assertRaises(CommandError) as cm:
            run('synth', '--corpus_dir', str(self.tmp / 'bad'), '--topics', '100', '--pins', '10')
        self.assertEqual(cm.exception.returncode, 1)


class TrainCommandTest(CommandTestCase):
    def test_outputs(self):
        for name in ('model.ckpt', 'metrics.log', 'ranker_metrics.log', 'run.cfg'):
            self.assertTrue((self.out / name).exists(), name)
        self.assertIn('Trained dense_all_action for', self.train_output)
        self.assertRegex((self.out / 'metrics.log').read_text(), r'step=1 loss=')

    def test_checkpoint_holds_both_models(self):
        names = list(load_checkpoint(self.out / 'model.ckpt'))
        self.assertTrue(any(n.startswith('ranker/') for n in names))
        self.assertTrue(any(n.startswith('user_tower/') for n in names))

    def test_rerun_is_bitwise_identical(self):
        again = self.tmp / 'run_again'
        run('train', '--corpus_dir', str(self.corpus), '--out', str(again), '--train_ranker', 'true',
            *SMALL_WORLD, *SMALL_MODEL)
        for name in ('model.ckpt', 'metrics.log', 'ranker_metrics.log'):
            self.assertEqual((again / name).read_bytes(), (self.out / name).read_bytes(), name)

    def test_missing_corpus(self):
        with self.assertRaises(CommandError) as cm:
            run('train', '--corpus_dir', str(self.tmp / 'missing'), '--out', str(self.tmp / 'x'))
        self.assertEqual(cm.exception.returncode, 1)


class EvalCommandTest(CommandTestCase):
    def test_checkpoint_report(self):
        output = run('eval', *self.model_args())
        self.assertIn('recall@10,dense_all_action,3,', output)
        self.assertIn('recall@1,mean_embedding,3,', output)
        self.assertIn('auc,ranker,3,', output)
        self.assertIn('responsiveness,ranker,3,', output)
        self.assertEqual((self.out / 'eval_report.txt').read_text() + 'Report written to '
                         f"{self.out / 'eval_report.txt'}\n", output)

    def test_report_is_deterministic(self):
        first = run('eval', *self.model_args())
        second = run('eval', *self.model_args())
        self.assertEqual(first, second)

    def test_comparison_needs_three_seeds(self):
        with self.assertRaises(CommandError):
            run('eval', '--compare', 'losses', '--seeds', '1,2', *self.model_args())


class RankCommandTest(CommandTestCase):
    def test_prints_sorted_scores(self):
        candidates = self.tmp / 'candidates.txt'
        candidates.write_text('# candidate pins\n5 1\n9\n30  # trailing comment\n')
        output = run('rank', '--user', '0', '--candidates', str(candidates), *self.model_args())
        lines = output.splitlines()
        self.assertEqual(sorted(int(line.split()[0]) for line in lines), [1, 5, 9, 30])
        scores = [float(line.split()[1]) for line in lines]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_unknown_user(self):
        candidates = self.tmp / 'one.txt'
        candidates.write_text('1\n')
        with self.assertRaises(CommandError):
            run('rank', '--user', '999', '--candidates', str(candidates), *self.model_args())

    def test_read_candidates(self):
        path = self.tmp / 'bad.txt'
        path.write_text('1 2 three\n')
        with self.assertRaises(ValueError):
            read_candidates(path)


class PlanCommandTest(SimpleTestCase):
    def test_named(self):
        output = run('plan')
        self.assertIn('(e)', output)
        self.assertIn('Fastest named plan: (e) 1100.0us', output)

    def test_search(self):
        output = run('plan', '--mode', 'search')
        self.assertIn('latency_us=1100.0', output)
        self.assertIn('matches named plan (e)', output)

    def test_transfer_override(self):
        output = run('plan', '--transfer', 'overhead=0,bw=1000')
        self.assertIn('Fastest named plan', output)

    def test_bad_transfer(self):
        with self.assertRaises(CommandError):
            run('plan', '--transfer', 'speed=3')


class GradcheckCommandTest(SimpleTestCase):
    def test_passes(self):
        output = run('gradcheck', '--coords', '60')
        self.assertIn('PASS', output)
        self.assertIn('Gradient check passed for dense_all_action', output)


class CommandLineTest(SimpleTestCase):
    """Exit statuses when invoked through manage.py"""

    def test_unknown_flag_is_a_usage_error(self):
        with mock.patch('sys.stderr', new_callable=StringIO), self.assertRaises(SystemExit) as cm:
            execute_from_command_line(['manage.py', 'plan', '--bogus'])
        self.assertEqual(cm.exception.code, 2)

    def test_runtime_error_exits_with_one(self):
        with mock.patch('sys.stderr', new_callable=StringIO) as err, self.assertRaises(SystemExit) as cm:
            execute_from_command_line(['manage.py', 'train', '--corpus_dir', '/nonexistent/corpus'])
        self.assertEqual(cm.exception.code, 1)
        self.assertIn('missing input', err.getvalue())
