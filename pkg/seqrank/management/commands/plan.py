"""
Management command to evaluate serving placements of the ranking model
"""

from django.conf import settings

from seqrank.management.base import RunConfigCommand
from seqrank.serving import (
    NAMED_PLANS,
    TransferModel,
    evaluate_named_plans,
    matches_plan,
    parse_graph,
    render_named_plans,
    search_placement,
)


class Command(RunConfigCommand):
    help = 'Critical-path latency of named CPU/GPU placements (--mode named) or the best placement (--mode search)'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--graph',
            default=None,
            help='Operator graph file (default: settings.SEQRANK_PLAN_GRAPH)'
        )
        parser.add_argument(
            '--transfer',
            default=None,
            help='Transfer cost model as overhead=U,bw=B (default: transfer_* config keys)'
        )
        parser.add_argument(
            '--mode',
            choices=['named', 'search'],
            default='named',
            help='Report the named plans or search for the minimum-latency placement'
        )

    def run(self, cfg, **options):
        graph = parse_graph(options['graph'] or settings.SEQRANK_PLAN_GRAPH)
        if options['transfer']:
            transfer = TransferModel.parse(options['transfer'], coalesce_transfers=cfg['coalesce_transfers'])
        else:
            transfer = TransferModel.from_run_config(cfg)

        if options['mode'] == 'named':
            rows = evaluate_named_plans(graph, transfer)
            self.stdout.write(render_named_plans(rows), ending='')
            best = min(rows[1:], key=lambda r: r.latency_us)
            self.success(f"Fastest named plan: ({best.name}) {best.latency_us:.1f}us")
            return

        result = search_placement(graph, transfer, budget=cfg['search_budget'])
        self.stdout.write(result.render(graph), ending='')
        for name, _, cpu_kinds in NAMED_PLANS:
            if cpu_kinds is not None and matches_plan(result, graph, cpu_kinds):
                self.stdout.write(f"matches named plan ({name})")
        self.success(f"Best placement: {result.latency_us:.1f}us ({result.evaluated} placements evaluated)")
