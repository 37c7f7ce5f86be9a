"""
Management command to finite-difference check the towers' gradients
"""

from django.core.management.base import CommandError

from seqrank.management.base import RunConfigCommand
from seqrank.training import check_model_gradients


class Command(RunConfigCommand):
    help = 'Central finite-difference check of user tower + pin tower + loss in 64-bit'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--coords',
            type=int,
            default=400,
            help='Number of sampled parameter coordinates (0 checks all)'
        )
        parser.add_argument(
            '--tolerance',
            type=float,
            default=1e-4,
            help='Maximum allowed relative error'
        )

    def run(self, cfg, **options):
        report = check_model_gradients(
            seed=cfg['seed'],
            max_coords=options['coords'] or None,
            tolerance=options['tolerance'],
            loss_kind=cfg['loss_kind'],
        )
        self.stdout.write(report.summary())
        if not report.passed:
            raise CommandError(f"gradient check failed for {', '.join(report.failures)}", returncode=1)
        self.success(f"Gradient check passed for {cfg['loss_kind']} ({report.n_coords} coordinates)")
