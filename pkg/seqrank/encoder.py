"""
Action encoder

Turns raw actions into the user tower's input matrix. The per-action layout is
fixed (see ``feature_layout``); rows are right-aligned so the most recent
action always sits in the last row.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from .datasynth import (
    ACTION_TYPES,
    SECONDS_PER_DAY,
    SURFACES,
    ActionRecord,
    Pin,
    PinCatalog,
    UserHistory,
)
from .exceptions import ConfigError, EmptyInputError, ShapeError, TemporalOrderError
from .numerics import Tensor, add, take

logger = logging.getLogger(__name__)

N_TIME_FEATURES = 4
N_DURATION_FEATURES = 1

# 1970-01-01 was a Thursday; shift so Monday maps to 0.
_WEEKDAY_SHIFT = 3


@dataclass(frozen=True)
class EncoderConfig:
    M: int
    d_pin: int
    d_h: int

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be at least 1, got {self.M}")
        if self.d_pin < 1 or self.d_h < 1:
            raise ConfigError(f"invalid widths d_pin={self.d_pin} d_h={self.d_h}")

    @property
    def d_feat(self) -> int:
        return self.d_pin + len(ACTION_TYPES) + len(SURFACES) + N_DURATION_FEATURES + N_TIME_FEATURES

    @classmethod
    def from_run_config(cls, cfg) -> 'EncoderConfig':
        return cls(M=cfg['M'], d_pin=cfg['d_pin'], d_h=cfg['d_h'])


def feature_layout(d_pin: int) -> List[Tuple[str, int, int, str]]:
    """(name, offset, width, description) for every block of an action feature."""
    blocks = [
        ('pin_embedding', d_pin, 'content embedding of the engaged pin'),
        ('action_type', len(ACTION_TYPES), 'one-hot: ' + ', '.join(t.value for t in ACTION_TYPES)),
        ('surface', len(SURFACES), 'one-hot: ' + ', '.join(s.value for s in SURFACES)),
        ('log_duration', 1, 'log1p(duration seconds)'),
        ('log_age', 1, 'log1p(seconds between the action and the reference time)'),
        ('hour_sin', 1, 'sin(2*pi*hour_of_day/24)'),
        ('hour_cos', 1, 'cos(2*pi*hour_of_day/24)'),
        ('day_of_week', 1, 'weekday/7, Monday = 0'),
    ]
    layout = []
    offset = 0
    for name, width, description in blocks:
        layout.append((name, offset, width, description))
        offset += width
    return layout


def write_features_md(path: Union[str, Path], d_pin: int) -> Path:
    path = Path(path)
    lines = [
        '# Action feature layout',
        '',
        '| block | offset | width | description |',
        '|---|---|---|---|',
    ]
    lines += [f"| {name} | {offset} | {width} | {description} |"
              for name, offset, width, description in feature_layout(d_pin)]
    total = sum(width for _, _, width, _ in feature_layout(d_pin))
    lines += ['', f"Total width d_feat = {total}.", '']
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines))
    return path


def _time_features(timestamps: np.ndarray, ref_time: int) -> np.ndarray:
    age = ref_time - timestamps
    hour = (timestamps % SECONDS_PER_DAY) / 3600.0
    angle = 2.0 * np.pi * hour / 24.0
    weekday = ((timestamps // SECONDS_PER_DAY) + _WEEKDAY_SHIFT) % 7
    return np.stack([np.log1p(age), np.sin(angle), np.cos(angle), weekday / 7.0], axis=-1)


def encode_actions(actions: Sequence[ActionRecord], embeddings: np.ndarray, ref_time: int) -> np.ndarray:
    """
    Encode ``actions`` against ``ref_time``; ``embeddings[i]`` is the pin
    embedding of ``actions[i]``. Returns ``[len(actions), d_feat]`` float64.
    """
    n = len(actions)
    d_pin = embeddings.shape[1] if embeddings.ndim == 2 else 0
    stamps = np.array([a.timestamp for a in actions], dtype=np.int64)
    if n and stamps.max() > ref_time:
        late = actions[int(np.argmax(stamps))]
        raise TemporalOrderError(
            f"action on pin {late.pin_id} at {late.timestamp} is after reference time {ref_time}"
        )
    type_hot = np.zeros((n, len(ACTION_TYPES)))
    surface_hot = np.zeros((n, len(SURFACES)))
    for i, action in enumerate(actions):
        type_hot[i, ACTION_TYPES.index(action.action_type)] = 1.0
        surface_hot[i, SURFACES.index(action.surface)] = 1.0
    durations = np.log1p(np.array([a.duration for a in actions], dtype=np.float64)).reshape(n, 1)
    return np.concatenate([
        np.asarray(embeddings, dtype=np.float64).reshape(n, d_pin),
        type_hot,
        surface_hot,
        durations,
        _time_features(stamps, ref_time).reshape(n, N_TIME_FEATURES),
    ], axis=1)


def encode_action(action: ActionRecord, pin: Pin, ref_time: int) -> np.ndarray:
    if pin.pin_id != action.pin_id:
        raise ValueError(f"pin {pin.pin_id} does not match action pin {action.pin_id}")
    return encode_actions([action], pin.embedding[None, :], ref_time)[0]


class InputWindow(NamedTuple):
    """Right-aligned input rows; ``timestamps`` is 0 on padding rows."""

    features: np.ndarray
    mask: np.ndarray
    timestamps: np.ndarray
    actions: List[ActionRecord]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def recent_actions(actions: Sequence[ActionRecord], cut_time: int, limit: int) -> List[ActionRecord]:
    """The last ``limit`` actions at or before ``cut_time``, oldest first."""
    ordered = sorted((a for a in actions if a.timestamp <= cut_time), key=lambda a: a.timestamp)
    return ordered[-limit:] if limit > 0 else []


def build_input_matrix(history: Union[UserHistory, Sequence[ActionRecord]], cut_time: int,
                       cfg: EncoderConfig, pins: PinCatalog) -> InputWindow:
    actions = history.actions if isinstance(history, UserHistory) else history
    kept = recent_actions(actions, cut_time, cfg.M)
    if not kept:
        owner = f"user {history.user_id}" if isinstance(history, UserHistory) else 'sequence'
        raise EmptyInputError(f"{owner} has no actions at or before {cut_time}")
    n = len(kept)
    rows = encode_actions(kept, pins.embeddings[pins.rows(a.pin_id for a in kept)], cut_time)
    if rows.shape[1] != cfg.d_feat:
        raise ShapeError(f"encoded width {rows.shape[1]} != d_feat {cfg.d_feat}")
    features = np.zeros((cfg.M, cfg.d_feat))
    features[cfg.M - n:] = rows
    mask = np.zeros(cfg.M, dtype=bool)
    mask[cfg.M - n:] = True
    timestamps = np.zeros(cfg.M, dtype=np.int64)
    timestamps[cfg.M - n:] = [a.timestamp for a in kept]
    return InputWindow(features, mask, timestamps, kept)


def apply_positional_encoding(x: Tensor, pos_table: Tensor) -> Tensor:
    """Add the learned table to the last two axes of ``x``; extents must match exactly."""
    if x.shape[-2:] != pos_table.shape:
        raise ShapeError(
            f"positional table {list(pos_table.shape)} does not match input {list(x.shape)}"
        )
    return add(x, pos_table)


def leading_positions(pos_table: Tensor, length: int) -> Tensor:
    """First ``length`` rows of the table (used for prefix inputs)."""
    if length > pos_table.shape[0]:
        raise ShapeError(f"sequence length {length} exceeds positional table {pos_table.shape[0]}")
    if length == pos_table.shape[0]:
        return pos_table
    return take(pos_table, slice(0, length))
