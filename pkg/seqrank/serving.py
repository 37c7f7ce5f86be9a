"""
Serving placement planner

Models the ranking model as an operator graph with per-device costs and
computes plan latency as the transfer-aware critical path. Named plans cover
the CPU-only, GPU-only and consolidated mixed placements; ``search_placement``
finds the minimum-latency mixed placement.

Graph file format (``#`` starts a comment)::

    node <id> <kind> <cpu_us> <gpu_us|-> <out_bytes>
    edge <src> <dst>
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx

from .exceptions import ConfigError, GraphCycleError, GraphError, PlacementError

logger = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 20


class Device(str, Enum):
    CPU = 'cpu'
    GPU = 'gpu'


class OpKind(str, Enum):
    EMBEDDING_LOOKUP = 'embedding_lookup'
    PROJECTION = 'projection'
    FEATURE_PREPROCESS = 'feature_preprocess'
    TRANSFORMER_ENCODER = 'transformer_encoder'
    MLP_HEAD = 'mlp_head'
    OTHER = 'other'


@dataclass(frozen=True)
class OpNode:
    node_id: str
    kind: OpKind
    cpu_cost_us: float
    gpu_cost_us: Optional[float]
    output_bytes: float

    def __post_init__(self):
        if self.cpu_cost_us < 0 or (self.gpu_cost_us is not None and self.gpu_cost_us < 0):
            raise GraphError(f"node '{self.node_id}': costs must be non-negative")
        if self.output_bytes < 0:
            raise GraphError(f"node '{self.node_id}': output bytes must be non-negative")

    def eligible(self, device: Device) -> bool:
        return device is Device.CPU or self.gpu_cost_us is not None

    def cost(self, device: Device) -> float:
        if not self.eligible(device):
            raise PlacementError(f"node '{self.node_id}' ({self.kind.value}) cannot run on {device.value}")
        return self.cpu_cost_us if device is Device.CPU else self.gpu_cost_us


class OpGraph:
    """Acyclic operator graph; edges point from producer to consumer."""

    def __init__(self):
        self.graph = nx.DiGraph()

    def add_node(self, node: OpNode) -> None:
        if node.node_id in self.graph:
            raise GraphError(f"duplicate node '{node.node_id}'")
        self.graph.add_node(node.node_id, op=node)

    def add_edge(self, src: str, dst: str) -> None:
        for endpoint in (src, dst):
            if endpoint not in self.graph:
                raise GraphError(f"edge {src} -> {dst} references unknown node '{endpoint}'")
        self.graph.add_edge(src, dst)

    def validate(self) -> 'OpGraph':
        if not len(self.graph):
            raise GraphError('graph has no nodes')
        if not nx.is_directed_acyclic_graph(self.graph):
            cycle = nx.find_cycle(self.graph)
            raise GraphCycleError(f"graph has a cycle through node '{cycle[0][0]}'")
        return self

    def node(self, node_id: str) -> OpNode:
        return self.graph.nodes[node_id]['op']

    @property
    def nodes(self) -> List[OpNode]:
        return [self.node(n) for n in self.graph.nodes]

    @property
    def edges(self) -> List[Tuple[str, str]]:
        return list(self.graph.edges)

    @property
    def sinks(self) -> List[str]:
        return [n for n in self.graph.nodes if self.graph.out_degree(n) == 0]

    def kinds(self) -> Set[OpKind]:
        return {op.kind for op in self.nodes}

    def stages(self) -> Dict[str, int]:
        """Topological generation of every node."""
        return {n: i for i, generation in enumerate(nx.topological_generations(self.graph)) for n in generation}

    def order(self) -> List[str]:
        return list(nx.lexicographical_topological_sort(self.graph))

    def without_kind(self, kind: OpKind) -> 'OpGraph':
        """Drop every node of ``kind``, reconnecting its producers to its consumers."""
        reduced = OpGraph()
        reduced.graph = self.graph.copy()
        for node_id in [n for n in self.graph.nodes if self.node(n).kind is kind]:
            preds = list(reduced.graph.predecessors(node_id))
            succs = list(reduced.graph.successors(node_id))
            reduced.graph.remove_node(node_id)
            reduced.graph.add_edges_from((p, s) for p in preds for s in succs)
        return reduced

    def __len__(self) -> int:
        return len(self.graph)


Placement = Dict[str, Device]


@dataclass(frozen=True)
class TransferModel:
    overhead_us: float = 20.0
    bandwidth: float = 10.0
    coalesce_transfers: bool = False

    def __post_init__(self):
        if self.overhead_us < 0:
            raise ConfigError(f"transfer overhead must be non-negative, got {self.overhead_us}")
        if self.bandwidth <= 0:
            raise ConfigError(f"transfer bandwidth must be positive, got {self.bandwidth}")

    @classmethod
    def parse(cls, text: str, coalesce_transfers: bool = False) -> 'TransferModel':
        """Parse ``overhead=U,bw=B``."""
        values = {}
        for part in filter(None, (p.strip() for p in text.split(','))):
            key, sep, value = part.partition('=')
            if not sep or key.strip() not in ('overhead', 'bw'):
                raise ConfigError(f"bad transfer spec {text!r}; expected overhead=U,bw=B")
            try:
                values[key.strip()] = float(value)
            except ValueError:
                raise ConfigError(f"bad transfer value {part!r}") from None
        return cls(overhead_us=values.get('overhead', cls.overhead_us),
                   bandwidth=values.get('bw', cls.bandwidth),
                   coalesce_transfers=coalesce_transfers)

    @classmethod
    def from_run_config(cls, cfg) -> 'TransferModel':
        return cls(cfg['transfer_overhead_us'], cfg['transfer_bandwidth'], cfg['coalesce_transfers'])

    def cost(self, n_bytes: float) -> float:
        return self.overhead_us + n_bytes / self.bandwidth


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def parse_graph_text(text: str, source: str = '<graph>') -> OpGraph:
    graph = OpGraph()
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split('#', 1)[0].split()
        if not fields:
            continue
        where = f"{source}:{lineno}"
        if fields[0] == 'node':
            if len(fields) != 6:
                raise GraphError(f"{where}: expected 'node <id> <kind> <cpu_us> <gpu_us|-> <out_bytes>'")
            _, node_id, kind, cpu, gpu, out = fields
            try:
                op_kind = OpKind(kind)
            except ValueError:
                raise GraphError(f"{where}: unknown op kind '{kind}'") from None
            try:
                costs = (float(cpu), None if gpu == '-' else float(gpu), float(out))
            except ValueError:
                raise GraphError(f"{where}: non-numeric cost in {raw.strip()!r}") from None
            graph.add_node(OpNode(node_id, op_kind, *costs))
        elif fields[0] == 'edge':
            if len(fields) != 3:
                raise GraphError(f"{where}: expected 'edge <src> <dst>'")
            edges.append((where, fields[1], fields[2]))
        else:
            raise GraphError(f"{where}: unknown record '{fields[0]}'")
    for where, src, dst in edges:
        try:
            graph.add_edge(src, dst)
        except GraphError as exc:
            raise GraphError(f"{where}: {exc}") from None
    return graph.validate()


def parse_graph(path: Union[str, Path]) -> OpGraph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GraphError(f"cannot read graph file {path}: {exc.strerror}") from None
    return parse_graph_text(text, str(path))


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def check_placement(graph: OpGraph, placement: Mapping[str, Device]) -> None:
    missing = [n for n in graph.graph.nodes if n not in placement]
    if missing:
        raise PlacementError(f"placement does not assign nodes {missing}")
    for node_id in graph.graph.nodes:
        device = Device(placement[node_id])
        if not graph.node(node_id).eligible(device):
            raise PlacementError(f"node '{node_id}' cannot run on {device.value}")


def plan_latency(graph: OpGraph, placement: Mapping[str, Device], transfer: TransferModel) -> float:
    """
    Critical-path latency in microseconds. A node starts once every input has
    arrived; an input produced on the other device arrives after the transfer
    cost. With coalescing, crossings between the same pair of stages in the
    same direction share one overhead and their bytes are summed.
    """
    check_placement(graph, placement)
    g = graph.graph
    device = {n: Device(placement[n]) for n in g.nodes}
    finish: Dict[str, float] = {}
    stages = graph.stages() if transfer.coalesce_transfers else {}
    batches: Dict[Tuple[int, int, Device], float] = {}
    grouped: Dict[Tuple[int, int, Device], List[str]] = {}
    if transfer.coalesce_transfers:
        for u, v in g.edges:
            if device[u] is not device[v]:
                grouped.setdefault((stages[u], stages[v], device[v]), []).append(u)
    for node_id in graph.order():
        ready = 0.0
        for pred in g.predecessors(node_id):
            if device[pred] is device[node_id]:
                arrival = finish[pred]
            elif transfer.coalesce_transfers:
                key = (stages[pred], stages[node_id], device[node_id])
                if key not in batches:
                    producers = sorted(set(grouped[key]))
                    batches[key] = (max(finish[p] for p in producers) + transfer.overhead_us
                                    + sum(graph.node(p).output_bytes for p in producers) / transfer.bandwidth)
                arrival = batches[key]
            else:
                arrival = finish[pred] + transfer.cost(graph.node(pred).output_bytes)
            ready = max(ready, arrival)
        finish[node_id] = ready + graph.node(node_id).cost(device[node_id])
    return max(finish[s] for s in graph.sinks)


def all_on(graph: OpGraph, device: Device) -> Placement:
    """Every node on ``device`` where eligible, otherwise on CPU."""
    return {n: device if graph.node(n).eligible(device) else Device.CPU for n in graph.graph.nodes}


def kinds_on_cpu(graph: OpGraph, cpu_kinds: Iterable[OpKind]) -> Placement:
    """Listed kinds (and CPU-only nodes) on CPU, everything else on GPU."""
    cpu_kinds = set(cpu_kinds)
    placement = {}
    for node_id in graph.graph.nodes:
        op = graph.node(node_id)
        placement[node_id] = Device.CPU if op.kind in cpu_kinds or not op.eligible(Device.GPU) else Device.GPU
    return placement


# ---------------------------------------------------------------------------
# Named plans
# ---------------------------------------------------------------------------

REQUIRED_KINDS = (OpKind.EMBEDDING_LOOKUP, OpKind.PROJECTION, OpKind.FEATURE_PREPROCESS,
                  OpKind.TRANSFORMER_ENCODER)

NAMED_PLANS = (
    ("a'", 'CPU only', None),
    ('b', 'GPU only', ()),
    ('c', 'Mixed: embedding lookup on CPU', (OpKind.EMBEDDING_LOOKUP,)),
    ('d', 'Mixed: lookup + projection on CPU', (OpKind.EMBEDDING_LOOKUP, OpKind.PROJECTION)),
    ('e', 'Mixed: lookup + projection + preprocessing on CPU',
     (OpKind.EMBEDDING_LOOKUP, OpKind.PROJECTION, OpKind.FEATURE_PREPROCESS)),
)


@dataclass
class PlanRow:
    name: str
    description: str
    latency_us: float
    increase_pct: Optional[float]
    placement: Placement = field(repr=False, default_factory=dict)


def evaluate_named_plans(graph: OpGraph, transfer: TransferModel) -> List[PlanRow]:
    """
    Baseline (a) is all-CPU without transformer nodes; every other row
    reports its latency increase over that baseline.
    """
    missing = [k.value for k in REQUIRED_KINDS if k not in graph.kinds()]
    if missing:
        raise GraphError(f"graph lacks op kinds needed by the named plans: {', '.join(missing)}")
    reduced = graph.without_kind(OpKind.TRANSFORMER_ENCODER)
    base_placement = all_on(reduced, Device.CPU)
    baseline = plan_latency(reduced, base_placement, transfer)
    rows = [PlanRow('a', 'CPU only, no transformer (baseline)', baseline, None, base_placement)]
    for name, description, cpu_kinds in NAMED_PLANS:
        placement = all_on(graph, Device.CPU) if cpu_kinds is None else kinds_on_cpu(graph, cpu_kinds)
        latency = plan_latency(graph, placement, transfer)
        increase = 100.0 * (latency - baseline) / baseline if baseline > 0 else float('inf')
        rows.append(PlanRow(name, description, latency, increase, placement))
    return rows


def render_named_plans(rows: Sequence[PlanRow]) -> str:
    width = max(len(r.description) for r in rows) + 2
    lines = [f"{'plan':<6}{'strategy':<{width}}{'latency_us':>12}{'increase':>12}"]
    for row in rows:
        increase = '-' if row.increase_pct is None else f"{row.increase_pct:+.0f}%"
        label = f"({row.name})"
        lines.append(f"{label:<6}{row.description:<{width}}{row.latency_us:>12.1f}{increase:>12}")
    return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    placement: Placement
    latency_us: float
    mode: str
    evaluated: int
    truncated: bool = False

    def gpu_nodes(self) -> List[str]:
        return sorted(n for n, d in self.placement.items() if d is Device.GPU)

    def render(self, graph: OpGraph) -> str:
        lines = [f"mode={self.mode} evaluated={self.evaluated} truncated={str(self.truncated).lower()}",
                 f"latency_us={self.latency_us:.1f}"]
        for node_id in graph.order():
            op = graph.node(node_id)
            lines.append(f"  {node_id:<12}{op.kind.value:<22}{self.placement[node_id].value}")
        return '\n'.join(lines) + '\n'


def search_placement(graph: OpGraph, transfer: TransferModel, budget: int = 1 << 20) -> SearchResult:
    """
    Exhaustive search over GPU-eligible nodes when there are at most
    ``EXHAUSTIVE_LIMIT`` of them, otherwise per-kind greedy assignment followed
    by single-node hill climbing. Stops with ``truncated`` set once ``budget``
    placements have been evaluated.
    """
    if budget < 1:
        raise ConfigError(f"search budget must be positive, got {budget}")
    order = graph.order()
    flexible = [n for n in order if graph.node(n).eligible(Device.GPU)]
    cpu = all_on(graph, Device.CPU)
    if not flexible:
        return SearchResult(cpu, plan_latency(graph, cpu, transfer), 'trivial', 1)
    if len(flexible) <= EXHAUSTIVE_LIMIT:
        return _exhaustive(graph, transfer, flexible, budget)
    return _greedy(graph, transfer, flexible, budget)


def _exhaustive(graph: OpGraph, transfer: TransferModel, flexible: List[str], budget: int) -> SearchResult:
    base = all_on(graph, Device.CPU)
    best: Optional[Tuple[float, Placement]] = None
    evaluated = 0
    for devices in itertools.product((Device.CPU, Device.GPU), repeat=len(flexible)):
        if evaluated >= budget:
            logger.warning(f"placement search stopped after {evaluated} placements")
            return SearchResult(best[1], best[0], 'exhaustive', evaluated, truncated=True)
        placement = dict(base)
        placement.update(zip(flexible, devices))
        latency = plan_latency(graph, placement, transfer)
        evaluated += 1
        if best is None or latency < best[0]:
            best = (latency, placement)
    return SearchResult(best[1], best[0], 'exhaustive', evaluated)


def _greedy(graph: OpGraph, transfer: TransferModel, flexible: List[str], budget: int) -> SearchResult:
    evaluated = 0

    def latency_of(placement: Placement) -> float:
        nonlocal evaluated
        evaluated += 1
        return plan_latency(graph, placement, transfer)

    candidates = [all_on(graph, Device.CPU), all_on(graph, Device.GPU)]
    scored = [(latency_of(p), p) for p in candidates]
    best_latency, best = min(scored, key=lambda item: item[0])
    flip = {Device.CPU: Device.GPU, Device.GPU: Device.CPU}

    kinds = sorted({graph.node(n).kind for n in flexible}, key=lambda k: k.value)
    for kind in kinds:
        for device in (Device.CPU, Device.GPU):
            if evaluated >= budget:
                return SearchResult(best, best_latency, 'greedy', evaluated, truncated=True)
            trial = dict(best)
            trial.update({n: device for n in flexible if graph.node(n).kind is kind})
            latency = latency_of(trial)
            if latency < best_latency:
                best, best_latency = trial, latency

    improved = True
    while improved:
        improved = False
        for node_id in flexible:
            if evaluated >= budget:
                return SearchResult(best, best_latency, 'greedy', evaluated, truncated=True)
            trial = dict(best)
            trial[node_id] = flip[trial[node_id]]
            latency = latency_of(trial)
            if latency < best_latency:
                best, best_latency = trial, latency
                improved = True
    return SearchResult(best, best_latency, 'greedy', evaluated)


def matches_plan(result: SearchResult, graph: OpGraph, cpu_kinds: Iterable[OpKind]) -> bool:
    """True when the searched placement equals the named kinds-on-CPU pattern."""
    return result.placement == kinds_on_cpu(graph, cpu_kinds)
