"""
Management command to score candidate pins for one user
"""

from pathlib import Path

from seqrank.datasynth import load_world
from seqrank.exceptions import EmptyInputError
from seqrank.management.base import RunConfigCommand
from seqrank.realtime import load_models, rank_candidates


def read_candidates(path) -> list:
    """Pin ids separated by whitespace or newlines; ``#`` starts a comment."""
    ids = []
    for line in Path(path).read_text().splitlines():
        for token in line.split('#', 1)[0].split():
            try:
                ids.append(int(token))
            except ValueError:
                raise EmptyInputError(f"{path}: candidate {token!r} is not a pin id") from None
    return ids


class Command(RunConfigCommand):
    help = 'Rank candidate pins for --user with the real-time ranker; prints "pin_id score" lines, best first'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--user',
            type=int,
            required=True,
            help='User id in the corpus'
        )
        parser.add_argument(
            '--candidates',
            required=True,
            help='File of candidate pin ids'
        )
        parser.add_argument(
            '--request_time',
            type=int,
            default=None,
            help='Request timestamp (default: one second after the user\'s last action)'
        )

    def run(self, cfg, **options):
        world = load_world(cfg['corpus_dir'])
        tower, ranker = load_models(cfg, self.checkpoint_path(cfg))
        ranked = rank_candidates(
            ranker,
            tower,
            world,
            options['user'],
            read_candidates(options['candidates']),
            request_time=options['request_time'],
            window_days=cfg['ranker_window_days'],
        )
        for pin_id, score in ranked:
            self.stdout.write(f"{pin_id} {score:.6f}")
