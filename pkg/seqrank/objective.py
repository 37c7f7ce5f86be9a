"""
Retrieval objectives

Three losses over user-tower outputs, all built on the same sampled-softmax
pair primitive:

- dense all-action: every valid position predicts every positive in its
  forward window; the loss is the mean over (position, target) pairs
- all-action: the same, restricted to the last valid position
- next-action: every valid position predicts only the next positive action

Targets are pin ids. Scores are looked up in a ``PinTable`` holding the pin
tower output for every pin a batch needs.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .datasynth import DEFAULT_CLICK_MIN_DURATION, SECONDS_PER_DAY, ActionRecord, is_positive
from .exceptions import ConfigError, ShapeError, SkipBatch
from .model import UserTowerOutput
from .numerics import (
    Tensor,
    concat,
    constant,
    logsumexp_rows,
    matmul,
    mul,
    reshape,
    reduce_sum,
    scale,
    sub,
    take,
    transpose,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ('dense_all_action', 'all_action', 'next_action')

PositionTargets = List[List[int]]


@dataclass(frozen=True)
class ObjectiveConfig:
    window_days: float = 28.0
    temperature: float = 0.1
    n_random_negatives: int = 128
    use_in_batch_negatives: bool = True
    loss_kind: str = 'dense_all_action'
    click_min_duration: float = DEFAULT_CLICK_MIN_DURATION

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.window_days <= 0:
            raise ConfigError(f"window_days must be positive, got {self.window_days}")
        if self.n_random_negatives < 0:
            raise ConfigError(f"negatives must be non-negative, got {self.n_random_negatives}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind '{self.loss_kind}' (expected one of {', '.join(LOSS_KINDS)})")

    @classmethod
    def from_run_config(cls, cfg) -> 'ObjectiveConfig':
        return cls(window_days=cfg['window_days'], temperature=cfg['temperature'],
                   n_random_negatives=cfg['negatives'],
                   use_in_batch_negatives=cfg['in_batch_negatives'],
                   loss_kind=cfg['loss_kind'], click_min_duration=cfg['click_min_duration'])


class PinTable(NamedTuple):
    """Pin tower output rows addressed by pin id."""

    ids: np.ndarray
    embeddings: Tensor

    def rows(self, pin_ids: Iterable[int]) -> np.ndarray:
        pin_ids = np.asarray(list(pin_ids), dtype=np.int64)
        rows = np.searchsorted(self.ids, pin_ids)
        if pin_ids.size and (rows.max() >= len(self.ids) or np.any(self.ids[rows] != pin_ids)):
            missing = sorted(set(pin_ids.tolist()) - set(self.ids.tolist()))
            raise KeyError(f"pins {missing[:5]} are not in the pin table")
        return rows


def make_pin_table(pin_ids: Iterable[int], embeddings: Tensor) -> PinTable:
    """``pin_ids`` must be sorted and unique, aligned with the rows of ``embeddings``."""
    ids = np.asarray(list(pin_ids), dtype=np.int64)
    if ids.size and np.any(np.diff(ids) <= 0):
        raise ValueError("pin table ids must be strictly increasing")
    if embeddings.shape[0] != ids.size:
        raise ShapeError(f"pin table has {ids.size} ids but {embeddings.shape[0]} rows")
    return PinTable(ids, embeddings)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def _positives(history: Sequence[ActionRecord], click_min_duration: float):
    positives = sorted((a for a in history if is_positive(a, click_min_duration)),
                       key=lambda a: a.timestamp)
    stamps = np.array([a.timestamp for a in positives], dtype=np.int64)
    pins = np.array([a.pin_id for a in positives], dtype=np.int64)
    return stamps, pins


def build_position_targets(timestamps: np.ndarray, mask: np.ndarray,
                           history: Sequence[ActionRecord], cfg: ObjectiveConfig) -> PositionTargets:
    """Per position: pin ids of positives with timestamp in ``(t_i, t_i + window]``."""
    stamps, pins = _positives(history, cfg.click_min_duration)
    window = int(round(cfg.window_days * SECONDS_PER_DAY))
    targets: PositionTargets = []
    for t, valid in zip(np.asarray(timestamps), np.asarray(mask, dtype=bool)):
        if not valid:
            targets.append([])
            continue
        lo = np.searchsorted(stamps, t, side='right')
        hi = np.searchsorted(stamps, t + window, side='right')
        targets.append(pins[lo:hi].tolist())
    return targets


def build_next_action_targets(timestamps: np.ndarray, mask: np.ndarray,
                              history: Sequence[ActionRecord],
                              click_min_duration: float = DEFAULT_CLICK_MIN_DURATION) -> PositionTargets:
    """Per position: the first positive strictly after ``t_i`` (empty if none)."""
    stamps, pins = _positives(history, click_min_duration)
    targets: PositionTargets = []
    for t, valid in zip(np.asarray(timestamps), np.asarray(mask, dtype=bool)):
        lo = np.searchsorted(stamps, t, side='right')
        targets.append([int(pins[lo])] if valid and lo < len(pins) else [])
    return targets


# ---------------------------------------------------------------------------
# Negatives
# ---------------------------------------------------------------------------

def sample_negatives(batch_targets: Sequence[PositionTargets], pin_ids: np.ndarray,
                     cfg: ObjectiveConfig, seed: int, epoch: int = 0,
                     batch_index: int = 0) -> List[np.ndarray]:
    """
    Negative pin ids per example: uniform draws without replacement from pins
    outside the example's targets, plus other examples' targets when in-batch
    negatives are enabled. Deterministic in ``(seed, epoch, batch_index)``.
    """
    pin_ids = np.unique(np.asarray(pin_ids, dtype=np.int64))
    if cfg.n_random_negatives >= len(pin_ids):
        raise ConfigError(
            f"negatives ({cfg.n_random_negatives}) must be smaller than the corpus ({len(pin_ids)} pins)"
        )
    rng = np.random.default_rng([seed, epoch, batch_index])
    owned = [np.unique(np.array([p for position in ex for p in position], dtype=np.int64))
             for ex in batch_targets]
    negatives = []
    for i, own in enumerate(owned):
        pool = np.setdiff1d(pin_ids, own, assume_unique=True)
        n = min(cfg.n_random_negatives, len(pool))
        drawn = np.sort(rng.choice(pool, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
        if cfg.use_in_batch_negatives:
            others = [o for j, o in enumerate(owned) if j != i]
            if others:
                in_batch = np.setdiff1d(np.concatenate(others), own)
                drawn = np.union1d(drawn, in_batch)
        negatives.append(drawn.astype(np.int64))
    return negatives


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_retrieval_loss(u, positive, negatives, temperature: float) -> Tensor:
    """``-log softmax`` of the positive among ``[positive] + negatives`` at temperature ``temperature``."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    u = u if isinstance(u, Tensor) else constant(u)
    positive = positive if isinstance(positive, Tensor) else constant(positive)
    negatives = negatives if isinstance(negatives, Tensor) else constant(np.reshape(negatives, (-1, u.shape[-1])))
    d = u.shape[-1]
    candidates = concat([reshape(positive, (1, d)), negatives], axis=0)
    logits = scale(matmul(candidates, reshape(u, (d, 1))), 1.0 / temperature)
    logits = reshape(logits, (candidates.shape[0],))
    return sub(logsumexp_rows(logits), take(logits, 0))


def _pair_loss_sum(user_rows: Tensor, table: PinTable, targets: PositionTargets,
                   positions: Sequence[int], negative_rows: np.ndarray, temperature: float):
    pair_pos: List[int] = []
    pair_col: List[int] = []
    for i in positions:
        for pin in targets[i]:
            pair_pos.append(i)
            pair_col.append(pin)
    if not pair_pos:
        return None, 0
    cols = table.rows(pair_col)
    pos_index = np.asarray(pair_pos, dtype=np.int64)
    n_pairs = len(pair_pos)
    positive = scale(reduce_sum(mul(take(user_rows, pos_index), take(table.embeddings, cols)), axis=1),
                     1.0 / temperature)
    if not negative_rows.size:
        return reduce_sum(sub(positive, positive)), n_pairs
    # Every pair at position i shares the negatives' log-partition term.
    negative = scale(matmul(user_rows, transpose(take(table.embeddings, negative_rows))), 1.0 / temperature)
    partition = take(logsumexp_rows(negative), pos_index)
    logits = concat([reshape(positive, (n_pairs, 1)), reshape(partition, (n_pairs, 1))], axis=1)
    return reduce_sum(sub(logsumexp_rows(logits), positive)), n_pairs


def retrieval_loss(tower_out: UserTowerOutput, targets: Sequence[PositionTargets], table: PinTable,
                   negatives: Sequence[np.ndarray], temperature: float, last_only: bool = False) -> Tensor:
    """
    Mean sampled-softmax loss over every contributing (position, target) pair
    of a batch. ``tower_out`` may hold one sequence or a batch; ``targets`` and
    ``negatives`` are per sequence.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    embeddings = tower_out.embeddings
    masks = np.asarray(tower_out.mask, dtype=bool)
    if masks.ndim == 1:
        embeddings = reshape(embeddings, (1,) + embeddings.shape)
        masks = masks[None, :]
    if len(targets) != masks.shape[0] or len(negatives) != masks.shape[0]:
        raise ShapeError(f"{masks.shape[0]} sequences but {len(targets)} target sets "
                         f"and {len(negatives)} negative sets")
    total: Optional[Tensor] = None
    count = 0
    for b in range(masks.shape[0]):
        valid = np.flatnonzero(masks[b])
        if not valid.size:
            continue
        positions = valid[-1:] if last_only else valid
        neg_rows = table.rows(negatives[b]) if len(negatives[b]) else np.zeros(0, dtype=np.int64)
        part, n = _pair_loss_sum(take(embeddings, b), table, targets[b], positions, neg_rows, temperature)
        if part is None:
            continue
        total = part if total is None else total + part
        count += n
    if total is None:
        raise SkipBatch('batch has no (position, target) pairs')
    return scale(total, 1.0 / count)


def dense_all_action_loss(tower_out: UserTowerOutput, targets: Sequence[PositionTargets], table: PinTable,
                          negatives: Sequence[np.ndarray], cfg: ObjectiveConfig) -> Tensor:
    return retrieval_loss(tower_out, targets, table, negatives, cfg.temperature)


def all_action_loss(tower_out: UserTowerOutput, targets: Sequence[PositionTargets], table: PinTable,
                    negatives: Sequence[np.ndarray], cfg: ObjectiveConfig) -> Tensor:
    return retrieval_loss(tower_out, targets, table, negatives, cfg.temperature, last_only=True)


def next_action_loss(tower_out: UserTowerOutput, next_targets: Sequence[PositionTargets], table: PinTable,
                     negatives: Sequence[np.ndarray], cfg: ObjectiveConfig) -> Tensor:
    """``next_targets`` come from ``build_next_action_targets``."""
    return retrieval_loss(tower_out, next_targets, table, negatives, cfg.temperature)


LOSS_FUNCTIONS = {
    'dense_all_action': dense_all_action_loss,
    'all_action': all_action_loss,
    'next_action': next_action_loss,
}


def targets_for(kind: str, timestamps: np.ndarray, mask: np.ndarray,
                history: Sequence[ActionRecord], cfg: ObjectiveConfig) -> PositionTargets:
    """Position targets for the given loss kind."""
    if kind == 'next_action':
        return build_next_action_targets(timestamps, mask, history, cfg.click_min_duration)
    return build_position_targets(timestamps, mask, history, cfg)
