"""
Management command for offline evaluation and the comparison harnesses
"""

from seqrank.checkpoint import load_checkpoint
from seqrank.datasynth import load_world, partition_users
from seqrank.evaluation import (
    EvalReport,
    compare_losses,
    compare_time_masks,
    evaluate_ranker,
    evaluate_retrieval,
    mean_embedding_recall,
)
from seqrank.management.base import RunConfigCommand
from seqrank.model import TwoTowerModel
from seqrank.realtime import load_models


class Command(RunConfigCommand):
    help = 'Evaluate a checkpoint on held-out users, or run a seeded comparison with --compare'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--compare',
            choices=['losses', 'masks'],
            default=None,
            help='Train and compare loss kinds or time-window masks over --seeds instead of reading a checkpoint'
        )

    def run(self, cfg, **options):
        if options['compare'] == 'losses':
            report = compare_losses(cfg, cfg.int_list('seeds'))
        elif options['compare'] == 'masks':
            report = compare_time_masks(cfg, cfg.int_list('seeds'))
        else:
            report = self.evaluate_checkpoint(cfg)

        out = self.out_dir(cfg)
        path = out / 'eval_report.txt'
        path.write_text(report.render())
        self.stdout.write(report.render(), ending='')
        self.success(f"Report written to {path}")

    def evaluate_checkpoint(self, cfg) -> EvalReport:
        world = load_world(cfg['corpus_dir'])
        _, heldout = partition_users(world.users, cfg['holdout_fraction'])
        checkpoint = self.checkpoint_path(cfg)
        has_ranker = any(name.startswith('ranker/') for name in load_checkpoint(checkpoint))
        if has_ranker:
            tower, ranker = load_models(cfg, checkpoint)
        else:
            tower, ranker = TwoTowerModel.from_run_config(cfg), None
            tower.load(checkpoint)

        seed = cfg['seed']
        report = EvalReport(seeds=[seed])
        ks = cfg.int_list('recall_ks')
        for k, value in evaluate_retrieval(tower, world, heldout, cfg, ks).items():
            report.add(f"recall@{k}", cfg['loss_kind'], seed, value)
        for k, value in mean_embedding_recall(world, heldout, cfg, ks).items():
            report.add(f"recall@{k}", 'mean_embedding', seed, value)
        if ranker is not None:
            for metric, value in evaluate_ranker(ranker, tower, world, heldout, cfg, seed).items():
                report.add(metric, 'ranker', seed, value)
        return report
