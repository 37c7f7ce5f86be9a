"""
Offline evaluation

Retrieval recall@k on held-out users' future windows, ranker AUC, and the
seeded comparison harnesses (loss kinds, time-window masks). Reports render
both as a table and as ``metric,model,seed,value`` lines.
"""

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .datasynth import (
    UserHistory,
    World,
    is_positive,
    partition_users,
    split_corpus,
    world_from_config,
)
from .encoder import build_input_matrix
from .exceptions import ConfigError, EmptyInputError, NumericalError, UndefinedMetricError
from .model import TwoTowerModel
from .objective import LOSS_KINDS
from .realtime import (
    RealtimeRanker,
    long_term_embeddings,
    mean_responsiveness,
    replay_impressions,
    score_impressions,
    train_ranker,
)
from .training import train_towers

logger = logging.getLogger(__name__)

MIN_COMPARISON_SEEDS = 3


class PinIndex:
    """Exhaustive dot-product index over pin vectors."""

    def __init__(self, ids: np.ndarray, vectors: np.ndarray):
        if len(ids) == 0:
            raise EmptyInputError('pin index is empty')
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    def ranked(self, query: np.ndarray) -> np.ndarray:
        """Pin ids by descending score; equal scores fall back to ascending id."""
        scores = self.vectors @ np.asarray(query, dtype=np.float64)
        return self.ids[np.lexsort((self.ids, -scores))]


def recall_at_k(user_embedding: np.ndarray, positives: Iterable[int], index: PinIndex, k: int) -> float:
    """|top-k ∩ positives| / min(k, |positives|) over distinct positive pins."""
    return recall_at_ks(user_embedding, positives, index, [k])[k]


def recall_at_ks(user_embedding: np.ndarray, positives: Iterable[int], index: PinIndex,
                 ks: Sequence[int]) -> Dict[int, float]:
    wanted = set(int(p) for p in positives)
    if not wanted:
        raise UndefinedMetricError('recall is undefined for a user without future positives')
    if any(k < 1 for k in ks):
        raise ConfigError(f"recall cut-offs must be positive, got {list(ks)}")
    order = index.ranked(user_embedding)
    hits = np.cumsum([int(p) in wanted for p in order])
    return {k: float(hits[min(k, len(order)) - 1]) / min(k, len(wanted)) for k in ks}


def auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(scores, method='average')
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: List[Tuple[str, str, int, float]] = field(default_factory=list)
    failures: List[Tuple[str, int, str]] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def add(self, metric: str, model: str, seed: int, value: float) -> None:
        self.rows.append((metric, model, seed, float(value)))

    def fail(self, model: str, seed: int, reason: str) -> None:
        logger.warning(f"run {model} seed={seed} excluded: {reason}")
        self.failures.append((model, seed, reason))

    def values(self, metric: str, model: str) -> Dict[int, float]:
        return {seed: value for m, name, seed, value in self.rows if m == metric and name == model}

    def summary(self) -> Dict[Tuple[str, str], Tuple[float, float, float]]:
        """(metric, model) -> (mean, min, max) over seeds."""
        grouped: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        for metric, model, _, value in self.rows:
            grouped[(metric, model)].append(value)
        return {key: (float(np.mean(v)), float(np.min(v)), float(np.max(v))) for key, v in grouped.items()}

    def machine_lines(self) -> str:
        return ''.join(f"{metric},{model},{seed},{value:.6f}\n" for metric, model, seed, value in self.rows)

    def render_table(self) -> str:
        summary = self.summary()
        if not summary:
            return 'no results\n'
        width = max(len(model) for _, model in summary) + 2
        lines = [f"{'model':<{width}}{'metric':<16}{'mean':>10}{'min':>10}{'max':>10}"]
        for (metric, model), (mean, low, high) in sorted(summary.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            lines.append(f"{model:<{width}}{metric:<16}{mean:>10.4f}{low:>10.4f}{high:>10.4f}")
        for model, seed, reason in self.failures:
            lines.append(f"FAILED {model} seed={seed}: {reason}")
        if self.seeds:
            lines.append(f"seeds: {','.join(str(s) for s in self.seeds)}  runtime: {self.runtime_seconds:.1f}s")
        return '\n'.join(lines) + '\n'

    def render(self) -> str:
        return self.render_table() + '\n' + self.machine_lines()


# ---------------------------------------------------------------------------
# Retrieval evaluation
# ---------------------------------------------------------------------------

def heldout_examples(users: Sequence[UserHistory], cfg):
    """Held-out users cut ``eval_window_days`` before the corpus end, with targets."""
    examples = split_corpus(users, 'horizon_end', cfg['eval_window_days'],
                            seed=cfg['seed'], click_min_duration=cfg['click_min_duration'])
    return [ex for ex in examples if ex.targets]


def evaluate_retrieval(model: TwoTowerModel, world: World, users: Sequence[UserHistory], cfg,
                       ks: Sequence[int]) -> Dict[int, float]:
    """Mean recall@k of the two-tower model over ``users``' future windows."""
    examples = heldout_examples(users, cfg)
    if not examples:
        raise EmptyInputError('no held-out user has future positives')
    windows = [build_input_matrix(ex.inputs, ex.cut_time, model.encoder, world.pins) for ex in examples]
    queries = model.embed_users(windows)
    index = PinIndex(world.pins.ids, model.embed_pins(world.pins.embeddings))
    totals = {k: 0.0 for k in ks}
    for query, ex in zip(queries, examples):
        for k, value in recall_at_ks(query, (a.pin_id for a in ex.targets), index, ks).items():
            totals[k] += value
    return {k: totals[k] / len(examples) for k in ks}


def mean_embedding_recall(world: World, users: Sequence[UserHistory], cfg,
                          ks: Sequence[int]) -> Dict[int, float]:
    """Reference predictor: average content embedding of the user's last M positive inputs."""
    examples = heldout_examples(users, cfg)
    if not examples:
        raise EmptyInputError('no held-out user has future positives')
    index = PinIndex(world.pins.ids, world.pins.embeddings)
    totals = {k: 0.0 for k in ks}
    for ex in examples:
        liked = [a.pin_id for a in ex.inputs if is_positive(a, cfg['click_min_duration'])][-cfg['M']:]
        if not liked:
            liked = [a.pin_id for a in ex.inputs][-cfg['M']:]
        query = world.pins.embeddings[world.pins.rows(liked)].mean(axis=0)
        query = query / max(np.linalg.norm(query), 1e-12)
        for k, value in recall_at_ks(query, (a.pin_id for a in ex.targets), index, ks).items():
            totals[k] += value
    return {k: totals[k] / len(examples) for k in ks}


def evaluate_ranker(ranker: RealtimeRanker, tower: TwoTowerModel, world: World, users: Sequence[UserHistory],
                    cfg, seed: int) -> Dict[str, float]:
    """Held-out AUC and responsiveness of a ranker under its inference mask."""
    long_term = long_term_embeddings(tower, users, world.pins, cfg['ranker_window_days'])
    impressions = [imp for imp in replay_impressions(users, cfg['ranker_window_days'], cfg['click_min_duration'])
                   if imp.user_id in long_term]
    scores = score_impressions(ranker, impressions, world, long_term)
    metrics = {'auc': auc(scores, [imp.label for imp in impressions])}
    metrics['responsiveness'] = mean_responsiveness(ranker, world, users, long_term, seed=seed)
    return metrics


# ---------------------------------------------------------------------------
# Comparison harnesses
# ---------------------------------------------------------------------------

def _check_seeds(seeds: Sequence[int]) -> List[int]:
    seeds = list(seeds)
    if len(seeds) < MIN_COMPARISON_SEEDS:
        raise ConfigError(f"comparisons need at least {MIN_COMPARISON_SEEDS} seeds, got {len(seeds)}")
    return seeds


def compare_losses(cfg, seeds: Sequence[int], kinds: Sequence[str] = LOSS_KINDS,
                   include_reference: bool = True) -> EvalReport:
    """
    Train the towers once per (seed, loss kind) on identical data and report
    held-out recall@k. Runs with a non-finite loss are excluded and flagged.
    """
    seeds = _check_seeds(seeds)
    ks = cfg.int_list('recall_ks')
    report = EvalReport(seeds=seeds)
    started = time.monotonic()
    for seed in seeds:
        seeded = cfg.replace(seed=seed)
        world = world_from_config(seeded)
        _, heldout = partition_users(world.users, seeded['holdout_fraction'])
        if include_reference:
            for k, value in mean_embedding_recall(world, heldout, seeded, ks).items():
                report.add(f"recall@{k}", 'mean_embedding', seed, value)
        for kind in kinds:
            run_cfg = seeded.replace(loss_kind=kind)
            try:
                trained = train_towers(world, run_cfg)
            except NumericalError as exc:
                report.fail(kind, seed, str(exc))
                continue
            for k, value in evaluate_retrieval(trained.model, world, heldout, run_cfg, ks).items():
                report.add(f"recall@{k}", kind, seed, value)
            logger.info(f"seed={seed} loss={kind} done")
    report.runtime_seconds = time.monotonic() - started
    return report


def compare_time_masks(cfg, seeds: Sequence[int], masked_choices: Optional[Sequence[float]] = None) -> EvalReport:
    """
    Per seed, train one tower and two rankers: one with ``T_mask = 0`` and one
    with sampled masks. Each is evaluated under its own inference mask.
    """
    seeds = _check_seeds(seeds)
    masked_choices = list(masked_choices) if masked_choices is not None else cfg.float_list('t_mask_choices')
    report = EvalReport(seeds=seeds)
    started = time.monotonic()
    for seed in seeds:
        seeded = cfg.replace(seed=seed)
        world = world_from_config(seeded)
        _, heldout = partition_users(world.users, seeded['holdout_fraction'])
        tower = train_towers(world, seeded).model
        variants = (
            ('tmask_0', seeded.replace(mask_at_inference=False), [0.0]),
            ('tmask_sampled', seeded, masked_choices),
        )
        for name, run_cfg, choices in variants:
            try:
                trained = train_ranker(world, run_cfg, tower, t_mask_choices=choices)
            except NumericalError as exc:
                report.fail(name, seed, str(exc))
                continue
            for metric, value in evaluate_ranker(trained.ranker, tower, world, heldout, run_cfg, seed).items():
                report.add(metric, name, seed, value)
    report.runtime_seconds = time.monotonic() - started
    return report
