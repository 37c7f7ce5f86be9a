"""
Synthetic behavior corpus

Generates a seeded world of pins clustered around topic centroids and users
whose year-bounded action histories follow a drifting interest mixture, and
defines the on-disk corpus format:

- ``corpus.jsonl``: one action per line, fields user_id, pin_id, ts, type, dur, surface
- ``pins.jsonl``: pin_id, topic, embedding
- ``users.jsonl``: user_id, drift_rate, interest_mixture, drift_target

Every user draws from its own counter-based random stream, so the output does
not depend on the order (or sharding) in which users are generated.
"""

import gzip
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
MAX_HISTORY_DAYS = 365

# 2020-09-13T12:26:40Z; every synthetic history starts here.
EPOCH_START = 1_600_000_000

DEFAULT_CLICK_MIN_DURATION = 10.0


class ActionType(str, Enum):
    REPIN = 'repin'
    CLICK = 'click'
    CLOSEUP = 'closeup'
    HIDE = 'hide'
    REACTION = 'reaction'
    COMMENT = 'comment'


class Surface(str, Enum):
    HOMEFEED = 'homefeed'
    RELATED_PINS = 'related_pins'
    SEARCH = 'search'


ACTION_TYPES: Tuple[ActionType, ...] = tuple(ActionType)
SURFACES: Tuple[Surface, ...] = tuple(Surface)

POSITIVE_TYPES = frozenset({ActionType.REPIN, ActionType.CLICK, ActionType.REACTION, ActionType.COMMENT})

# Surface mix of generated impressions, in SURFACES order.
SURFACE_PROBS = np.array([0.6, 0.25, 0.15])

# Action-type logits are BASE + SLOPE * alignment, in ACTION_TYPES order.
_TYPE_BASE = np.array([-0.5, 0.0, 0.3, -1.5, -2.0, -3.0])
_TYPE_SLOPE = np.array([3.0, 1.5, 0.0, -3.0, 2.0, 2.0])

# Mean dwell (seconds) per action type; clicks scale with alignment instead.
_DWELL_MEAN = np.array([4.0, 0.0, 8.0, 1.0, 2.0, 20.0])

# Pins closer to their topic centroid are sampled more often.
_PIN_CONCENTRATION = 4.0


@dataclass(frozen=True)
class Pin:
    pin_id: int
    topic_id: int
    embedding: np.ndarray = field(compare=False, repr=False)


@dataclass(frozen=True)
class ActionRecord:
    """One engagement event of one user."""

    pin_id: int
    timestamp: int
    action_type: ActionType
    duration: float
    surface: Surface


@dataclass
class UserHistory:
    user_id: int
    interest_mixture: np.ndarray
    drift_rate: float
    actions: List[ActionRecord]
    drift_target: Optional[np.ndarray] = None

    def mixture_at(self, days: float) -> np.ndarray:
        """Interest mixture ``days`` after the start of the history."""
        if self.drift_target is None or self.drift_rate == 0:
            return self.interest_mixture
        lam = 1.0 - np.exp(-self.drift_rate * days)
        return (1.0 - lam) * self.interest_mixture + lam * self.drift_target


@dataclass
class TrainingExample:
    """One user's input actions at/before ``cut_time`` plus future positives."""

    user_id: int
    cut_time: int
    window_days: float
    inputs: List[ActionRecord]
    targets: List[ActionRecord]


class PinCatalog:
    """Pins indexed by id with a dense embedding matrix in id order."""

    def __init__(self, pins: Sequence[Pin]):
        ordered = sorted(pins, key=lambda p: p.pin_id)
        self.pins = ordered
        self.ids = np.array([p.pin_id for p in ordered], dtype=np.int64)
        self.topics = np.array([p.topic_id for p in ordered], dtype=np.int64)
        self.embeddings = np.stack([p.embedding for p in ordered]) if ordered else np.zeros((0, 0))
        self._row = {int(pid): i for i, pid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.pins)

    def __contains__(self, pin_id: int) -> bool:
        return int(pin_id) in self._row

    def row(self, pin_id: int) -> int:
        try:
            return self._row[int(pin_id)]
        except KeyError:
            raise KeyError(f"unknown pin id {pin_id}") from None

    def rows(self, pin_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.row(pid) for pid in pin_ids], dtype=np.int64)

    def get(self, pin_id: int) -> Pin:
        return self.pins[self.row(pin_id)]

    def embedding(self, pin_id: int) -> np.ndarray:
        return self.embeddings[self.row(pin_id)]

    def topic(self, pin_id: int) -> int:
        return int(self.topics[self.row(pin_id)])

    def in_topic(self, topic_id: int) -> np.ndarray:
        return self.ids[self.topics == topic_id]

    @property
    def d_pin(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_topics(self) -> int:
        return int(self.topics.max()) + 1 if len(self.topics) else 0


@dataclass
class World:
    pins: PinCatalog
    users: List[UserHistory]
    centroids: Optional[np.ndarray] = None

    def user(self, user_id: int) -> UserHistory:
        for history in self.users:
            if history.user_id == user_id:
                return history
        raise KeyError(f"unknown user id {user_id}")


def is_positive(action: ActionRecord, click_min_duration: float = DEFAULT_CLICK_MIN_DURATION) -> bool:
    """Repins, reactions, comments and clicks lasting at least ``click_min_duration``."""
    if action.action_type not in POSITIVE_TYPES:
        return False
    if action.action_type is ActionType.CLICK:
        return action.duration >= click_min_duration
    return True


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=-1, keepdims=True)


def _sparse_mixture(rng: np.random.Generator, n_topics: int) -> np.ndarray:
    k = int(rng.integers(1, min(3, n_topics) + 1))
    chosen = rng.choice(n_topics, size=k, replace=False)
    mixture = np.zeros(n_topics)
    mixture[chosen] = rng.dirichlet(np.ones(k))
    return mixture / mixture.sum()


def _inverse_cdf(cdf: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Row-wise categorical sampling from cumulative probabilities."""
    picks = (cdf < draws[:, None]).sum(axis=1)
    return np.minimum(picks, cdf.shape[1] - 1)


def generate_world(seed: int, n_topics: int, n_pins: int, n_users: int, d_pin: int,
                   horizon_days: float, *, actions_per_day: float = 4.0,
                   drift_rate: float = 0.005, explore_rate: float = 0.25,
                   pin_spread: float = 0.6) -> World:
    """
    Build pins and users deterministically from ``seed``.

    Each action samples a topic from the user's current mixture (or uniformly
    with probability ``explore_rate``), a pin near that topic's centroid, and
    an action type whose positives grow more likely as the pin aligns with the
    mixture and whose hides grow more likely as it diverges.
    """
    for name, value in (('n_topics', n_topics), ('n_pins', n_pins), ('n_users', n_users),
                        ('horizon_days', horizon_days), ('actions_per_day', actions_per_day)):
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
    if d_pin < 2:
        raise ConfigError(f"d_pin must be at least 2, got {d_pin}")
    if n_topics > n_pins:
        raise ConfigError(f"n_topics ({n_topics}) exceeds n_pins ({n_pins})")
    if horizon_days > MAX_HISTORY_DAYS:
        raise ConfigError(f"horizon_days ({horizon_days}) exceeds {MAX_HISTORY_DAYS}")
    if drift_rate < 0 or not 0.0 <= explore_rate <= 1.0:
        raise ConfigError(f"invalid drift_rate={drift_rate} / explore_rate={explore_rate}")

    rng = np.random.default_rng([seed, 0])
    centroids = _unit_rows(rng.normal(size=(n_topics, d_pin)))
    topics = np.concatenate([np.arange(n_topics), rng.integers(0, n_topics, size=n_pins - n_topics)])
    noise = rng.normal(size=(n_pins, d_pin)) / np.sqrt(d_pin)
    embeddings = _unit_rows(centroids[topics] + pin_spread * noise)
    pins = [Pin(pin_id=i, topic_id=int(topics[i]), embedding=embeddings[i]) for i in range(n_pins)]

    members: List[np.ndarray] = []
    member_cdfs: List[np.ndarray] = []
    for t in range(n_topics):
        idx = np.flatnonzero(topics == t)
        weights = np.exp(_PIN_CONCENTRATION * (embeddings[idx] @ centroids[t]))
        members.append(idx)
        member_cdfs.append(np.cumsum(weights / weights.sum()))

    users = [
        _generate_user(seed, user_id, centroids, embeddings, members, member_cdfs,
                       horizon_days, actions_per_day, drift_rate, explore_rate)
        for user_id in range(n_users)
    ]
    n_actions = int(np.sum([len(u.actions) for u in users]))
    logger.info(f"Generated world seed={seed}: {n_pins} pins, {n_topics} topics, "
                f"{n_users} users, {n_actions} actions")
    return World(pins=PinCatalog(pins), users=users, centroids=centroids)


def _generate_user(seed: int, user_id: int, centroids: np.ndarray, embeddings: np.ndarray,
                   members: List[np.ndarray], member_cdfs: List[np.ndarray],
                   horizon_days: float, actions_per_day: float, drift_rate: float,
                   explore_rate: float) -> UserHistory:
    rng = np.random.default_rng([seed, 1, user_id])
    n_topics = centroids.shape[0]
    start = _sparse_mixture(rng, n_topics)
    target = _sparse_mixture(rng, n_topics)
    rate = actions_per_day * float(np.exp(rng.normal(0.0, 0.5)))
    n_events = int(rng.poisson(rate * horizon_days))
    horizon_seconds = int(horizon_days * SECONDS_PER_DAY)
    offsets = np.sort(rng.integers(0, horizon_seconds, size=n_events))

    days = offsets / SECONDS_PER_DAY
    lam = 1.0 - np.exp(-drift_rate * days)
    mixtures = (1.0 - lam)[:, None] * start + lam[:, None] * target
    topic_draw = _inverse_cdf(np.cumsum(mixtures, axis=1), rng.random(n_events))
    explore = rng.random(n_events) < explore_rate
    event_topics = np.where(explore, rng.integers(0, n_topics, size=n_events), topic_draw)

    pin_draws = rng.random(n_events)
    event_pins = np.zeros(n_events, dtype=np.int64)
    for t in np.unique(event_topics):
        mask = event_topics == t
        picks = np.searchsorted(member_cdfs[t], pin_draws[mask], side='right')
        event_pins[mask] = members[t][np.minimum(picks, len(members[t]) - 1)]

    interest = _unit_rows(mixtures @ centroids) if n_events else np.zeros((0, centroids.shape[1]))
    alignment = np.einsum('ij,ij->i', embeddings[event_pins], interest)
    logits = _TYPE_BASE[None, :] + _TYPE_SLOPE[None, :] * alignment[:, None]
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    type_idx = _inverse_cdf(np.cumsum(probs, axis=1), rng.random(n_events))

    dwell = _DWELL_MEAN[type_idx]
    click_mean = 6.0 + 12.0 * (1.0 + alignment)
    dwell = np.where(type_idx == ACTION_TYPES.index(ActionType.CLICK), click_mean, dwell)
    durations = np.round(rng.exponential(1.0, size=n_events) * dwell, 1)
    surface_idx = _inverse_cdf(np.tile(np.cumsum(SURFACE_PROBS), (n_events, 1)), rng.random(n_events))

    actions = [
        ActionRecord(
            pin_id=int(event_pins[i]),
            timestamp=EPOCH_START + int(offsets[i]),
            action_type=ACTION_TYPES[type_idx[i]],
            duration=float(durations[i]),
            surface=SURFACES[surface_idx[i]],
        )
        for i in range(n_events)
    ]
    return UserHistory(user_id=user_id, interest_mixture=start, drift_rate=drift_rate,
                       actions=actions, drift_target=target)


def world_from_config(cfg) -> World:
    return generate_world(
        cfg['seed'], cfg['n_topics'], cfg['n_pins'], cfg['n_users'], cfg['d_pin'],
        cfg['horizon_days'], actions_per_day=cfg['actions_per_day'],
        drift_rate=cfg['drift_rate'], explore_rate=cfg['explore_rate'],
        pin_spread=cfg['pin_spread'],
    )


def partition_users(users: Sequence[UserHistory], holdout_fraction: float) -> Tuple[List[UserHistory], List[UserHistory]]:
    """Split users by id: the last ``holdout_fraction`` share is held out."""
    ordered = sorted(users, key=lambda u: u.user_id)
    n_holdout = int(round(len(ordered) * holdout_fraction))
    cut = len(ordered) - n_holdout
    return ordered[:cut], ordered[cut:]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

CutPolicy = Union[str, int]


def corpus_end(users: Sequence[UserHistory]) -> int:
    """Timestamp of the latest action of any user."""
    stamps = [u.actions[-1].timestamp for u in users if u.actions]
    return max(stamps) if stamps else EPOCH_START


def horizon_cut(users: Sequence[UserHistory], window_days: float) -> int:
    """Shared cut leaving a full ``window_days`` target window before the corpus end."""
    return corpus_end(users) - int(round(window_days * SECONDS_PER_DAY))


def _cut_time(history: UserHistory, policy: CutPolicy, global_end: int, window_seconds: int,
              seed: int) -> Optional[int]:
    if isinstance(policy, (int, np.integer)) and not isinstance(policy, bool):
        return int(policy)
    if policy == 'horizon_end':
        return global_end - window_seconds
    if policy == 'random':
        if not history.actions:
            return None
        first = history.actions[0].timestamp
        last = history.actions[-1].timestamp
        rng = np.random.default_rng([seed, 2, history.user_id])
        return int(rng.integers(first, last + 1))
    raise ConfigError(f"unknown cut policy {policy!r} (expected 'horizon_end', 'random' or a timestamp)")


def split_corpus(users: Sequence[UserHistory], cut_policy: CutPolicy, window_days: float,
                 *, seed: int = 0,
                 click_min_duration: float = DEFAULT_CLICK_MIN_DURATION) -> List[TrainingExample]:
    """
    Cut every user's history into inputs (``ts <= cut``) and positive targets
    (``cut < ts <= cut + window``).

    Users without any input action at their cut time are skipped; users with
    no future positives are kept with empty targets.
    """
    if window_days <= 0:
        raise ConfigError(f"window_days must be positive, got {window_days}")
    window_seconds = int(round(window_days * SECONDS_PER_DAY))
    global_end = corpus_end(users)
    examples = []
    skipped = 0
    for history in sorted(users, key=lambda u: u.user_id):
        cut = _cut_time(history, cut_policy, global_end, window_seconds, seed)
        if cut is None:
            skipped += 1
            continue
        inputs = [a for a in history.actions if a.timestamp <= cut]
        if not inputs:
            skipped += 1
            continue
        targets = [a for a in history.actions
                   if cut < a.timestamp <= cut + window_seconds and is_positive(a, click_min_duration)]
        examples.append(TrainingExample(history.user_id, cut, window_days, inputs, targets))
    if skipped:
        logger.debug(f"split_corpus: skipped {skipped} users with no input actions")
    return examples


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

CORPUS_FILE = 'corpus.jsonl'
PINS_FILE = 'pins.jsonl'
USERS_FILE = 'users.jsonl'


def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(',', ':'))


def action_to_record(user_id: int, action: ActionRecord) -> dict:
    return {
        'user_id': user_id,
        'pin_id': action.pin_id,
        'ts': action.timestamp,
        'type': action.action_type.value,
        'dur': action.duration,
        'surface': action.surface.value,
    }


def action_from_record(record: dict) -> ActionRecord:
    return ActionRecord(
        pin_id=int(record['pin_id']),
        timestamp=int(record['ts']),
        action_type=ActionType(record['type']),
        duration=float(record['dur']),
        surface=Surface(record['surface']),
    )


def _write_lines(path: Path, lines: Iterable[str], compress: bool) -> Path:
    payload = ''.join(line + '\n' for line in lines).encode('utf-8')
    if compress:
        path = path.with_name(path.name + '.gz')
        with open(path, 'wb') as raw:
            with gzip.GzipFile(filename='', mode='wb', fileobj=raw, mtime=0) as handle:
                handle.write(payload)
    else:
        path.write_bytes(payload)
    return path


def _resolve(directory: Path, name: str) -> Path:
    plain = directory / name
    if plain.exists():
        return plain
    packed = directory / (name + '.gz')
    if packed.exists():
        return packed
    raise FileNotFoundError(f"{plain} (or {packed.name}) not found")


def _read_lines(path: Path) -> List[str]:
    if path.suffix == '.gz':
        with gzip.open(path, 'rt', encoding='utf-8') as handle:
            return handle.read().splitlines()
    return path.read_text(encoding='utf-8').splitlines()


def write_world(world: World, directory: Union[str, Path], compress: bool = False) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    users = sorted(world.users, key=lambda u: u.user_id)
    corpus = _write_lines(
        directory / CORPUS_FILE,
        (_dumps(action_to_record(u.user_id, a)) for u in users for a in u.actions),
        compress,
    )
    pins = _write_lines(
        directory / PINS_FILE,
        (_dumps({'pin_id': p.pin_id, 'topic': p.topic_id, 'embedding': p.embedding.tolist()})
         for p in world.pins.pins),
        compress,
    )
    user_file = _write_lines(
        directory / USERS_FILE,
        (_dumps({
            'user_id': u.user_id,
            'drift_rate': u.drift_rate,
            'interest_mixture': u.interest_mixture.tolist(),
            'drift_target': u.drift_target.tolist() if u.drift_target is not None else None,
        }) for u in users),
        compress,
    )
    logger.info(f"Wrote corpus to {directory}")
    return {'corpus': corpus, 'pins': pins, 'users': user_file}


def load_world(directory: Union[str, Path]) -> World:
    directory = Path(directory)
    pins = []
    for line in _read_lines(_resolve(directory, PINS_FILE)):
        record = json.loads(line)
        pins.append(Pin(int(record['pin_id']), int(record['topic']), np.array(record['embedding'])))

    actions: Dict[int, List[ActionRecord]] = {}
    for line in _read_lines(_resolve(directory, CORPUS_FILE)):
        record = json.loads(line)
        actions.setdefault(int(record['user_id']), []).append(action_from_record(record))

    users = []
    try:
        user_lines = _read_lines(_resolve(directory, USERS_FILE))
    except FileNotFoundError:
        user_lines = []
    known = set()
    for line in user_lines:
        record = json.loads(line)
        uid = int(record['user_id'])
        known.add(uid)
        target = record.get('drift_target')
        users.append(UserHistory(
            user_id=uid,
            interest_mixture=np.array(record['interest_mixture']),
            drift_rate=float(record['drift_rate']),
            actions=actions.get(uid, []),
            drift_target=np.array(target) if target is not None else None,
        ))
    for uid in sorted(set(actions) - known):
        users.append(UserHistory(uid, np.zeros(0), 0.0, actions[uid]))
    users.sort(key=lambda u: u.user_id)
    for history in users:
        # Stable sort keeps the file order of same-second actions.
        history.actions.sort(key=lambda a: a.timestamp)
    return World(pins=PinCatalog(pins), users=users)


def corpus_digest(directory: Union[str, Path]) -> str:
    directory = Path(directory)
    digest = hashlib.sha256()
    digest.update(_resolve(directory, CORPUS_FILE).read_bytes())
    return digest.hexdigest()
