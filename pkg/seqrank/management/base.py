"""
Shared plumbing for the seqrank management commands.

Every key of ``settings.SEQRANK_RUN_DEFAULTS`` is accepted as ``--<key>`` by
every command, plus a few short aliases. Values are resolved flag > --config
file > default and validated before the command body runs.
"""

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from seqrank.config import RunConfig
from seqrank.exceptions import SeqrankError
from seqrank.numerics import float_width

logger = logging.getLogger('seqrank')

FLAG_ALIASES = {
    'n_users': '--users',
    'n_pins': '--pins',
    'n_topics': '--topics',
    'loss_kind': '--loss',
    'train_steps': '--steps',
    't_mask': '--tmask',
}

_VERBOSITY_LEVELS = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG, 3: logging.DEBUG}


class RunConfigCommand(BaseCommand):
    """Base command: resolves a ``RunConfig`` and maps seqrank errors to exit status 1."""

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            default=None,
            help='key = value file overriding the defaults in settings.SEQRANK_RUN_DEFAULTS'
        )
        group = parser.add_argument_group('run configuration')
        for key, default in settings.SEQRANK_RUN_DEFAULTS.items():
            flags = [f"--{key}"]
            if key in FLAG_ALIASES:
                flags.append(FLAG_ALIASES[key])
            group.add_argument(
                *flags,
                dest=f"cfg_{key}",
                default=None,
                metavar=type(default).__name__.upper(),
                help=f"(default: {default})"
            )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        """Hook for command-specific flags."""

    def resolve_config(self, options) -> RunConfig:
        overrides = {key: options.get(f"cfg_{key}") for key in settings.SEQRANK_RUN_DEFAULTS}
        return RunConfig.resolve(options.get('config'), overrides)

    def handle(self, *args, **options):
        logging.getLogger('seqrank').setLevel(_VERBOSITY_LEVELS.get(options.get('verbosity', 1), logging.INFO))
        try:
            cfg = self.resolve_config(options)
            with float_width(cfg['float_width']):
                self.run(cfg, **options)
        except SeqrankError as exc:
            raise CommandError(str(exc), returncode=1) from exc
        except OSError as exc:
            raise CommandError(f"missing input: {exc}", returncode=1) from exc

    def run(self, cfg: RunConfig, **options):
        raise NotImplementedError('subclasses of RunConfigCommand must provide a run() method')

    def out_dir(self, cfg: RunConfig) -> Path:
        path = Path(cfg['out'])
        path.mkdir(parents=True, exist_ok=True)
        return path

    def checkpoint_path(self, cfg: RunConfig) -> Path:
        if cfg['checkpoint']:
            return Path(cfg['checkpoint'])
        return Path(cfg['out']) / 'model.ckpt'

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
