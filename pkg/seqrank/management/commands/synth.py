"""
Management command to generate the synthetic behavior corpus
"""

from pathlib import Path

from seqrank.datasynth import corpus_digest, world_from_config, write_world
from seqrank.encoder import write_features_md
from seqrank.management.base import RunConfigCommand


class Command(RunConfigCommand):
    help = 'Generate a seeded synthetic corpus (pins, users, actions) into --corpus_dir'

    def run(self, cfg, **options):
        world = world_from_config(cfg)
        corpus_dir = Path(cfg['corpus_dir'])
        paths = write_world(world, corpus_dir, compress=cfg['compress'])
        write_features_md(corpus_dir / 'FEATURES.md', cfg['d_pin'])
        cfg.write(corpus_dir / 'run.cfg')

        n_actions = sum(len(u.actions) for u in world.users)
        self.stdout.write(f"corpus:  {paths['corpus']}")
        self.stdout.write(f"pins:    {paths['pins']}")
        self.stdout.write(f"users:   {paths['users']}")
        self.stdout.write(f"digest:  {corpus_digest(corpus_dir)}")
        self.success(
            f"Generated {len(world.pins)} pins, {len(world.users)} users, {n_actions} actions (seed {cfg['seed']})"
        )
