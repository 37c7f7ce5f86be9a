"""
Management command to train the two towers and, optionally, the ranker
"""

from seqrank.datasynth import load_world
from seqrank.management.base import RunConfigCommand
from seqrank.realtime import train_ranker
from seqrank.training import train_towers


class Command(RunConfigCommand):
    help = 'Train user and pin towers on --corpus_dir; writes model.ckpt, metrics.log and run.cfg to --out'

    def run(self, cfg, **options):
        world = load_world(cfg['corpus_dir'])
        out = self.out_dir(cfg)
        cfg.write(out / 'run.cfg')

        result = train_towers(world, cfg)
        metrics = result.write_loss_log(out / 'metrics.log')
        self.stdout.write(f"metrics:    {metrics}")

        checkpoint = self.checkpoint_path(cfg)
        if cfg['train_ranker']:
            ranked = train_ranker(world, cfg, result.model)
            ranker_log = out / 'ranker_metrics.log'
            ranker_log.write_text(''.join(f"step={step} loss={loss:.6f}\n" for step, loss in ranked.losses))
            self.stdout.write(f"ranker:     {ranker_log}")
            ranked.ranker.save(checkpoint, extra=result.model.params)
        else:
            result.model.save(checkpoint)
        self.stdout.write(f"checkpoint: {checkpoint}")

        message = f"Trained {cfg['loss_kind']} for {len(result.losses)} steps"
        if result.final_loss is not None:
            message += f" (final loss {result.final_loss:.4f})"
        self.success(message)
