"""
Real-time engagement ranker

Scores a candidate pin for a user from three token roles fed to one
transformer encoder:

- the candidate token (pin content embedding)
- the long-term token (the user tower embedding)
- up to P real-time tokens, the user's latest actions after one
  non-causal PreNorm attention block

Real-time actions newer than ``request_time - t_mask`` are dropped before
the latest P are taken, so they neither fill a slot nor move the score.
Empty slots are excluded from every attention and zeroed.

Parameter names live under ``ranker/``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .checkpoint import load_checkpoint, save_checkpoint
from .datasynth import (
    SECONDS_PER_DAY,
    ActionRecord,
    ActionType,
    PinCatalog,
    Surface,
    UserHistory,
    World,
    is_positive,
    partition_users,
)
from .encoder import EncoderConfig, build_input_matrix, encode_actions, recent_actions
from .exceptions import CheckpointError, ConfigError, EmptyInputError, NumericalError, TemporalOrderError
from .model import (
    INIT_STD,
    TwoTowerModel,
    add_ffn,
    add_layer_norm,
    add_mhsa,
    ffn_block,
    mhsa_block,
)
from .numerics import (
    Adam,
    ParameterSet,
    Tape,
    Tensor,
    add,
    bce_with_logits,
    concat,
    constant,
    is_finite,
    layer_norm,
    linear,
    mul,
    reshape,
    sigmoid,
    take,
)

logger = logging.getLogger(__name__)

ROLE_CANDIDATE, ROLE_LONG_TERM, ROLE_REALTIME = 0, 1, 2

_TRAIN_STREAM = 4
_SHUFFLE_STREAM = 5
_PROBE_STREAM = 6


@dataclass(frozen=True)
class RealtimeConfig:
    P: int
    t_mask: float
    d_pin: int
    d_h: int
    d_e: int
    n_layers: int = 1
    n_heads: int = 2
    d_ffn: int = 64
    mask_at_inference: bool = True

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError(f"P must be at least 1, got {self.P}")
        if self.t_mask < 0:
            raise ConfigError(f"t_mask must be non-negative, got {self.t_mask}")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h ({self.d_h}) must be divisible by ranker heads ({self.n_heads})")

    @property
    def d_feat(self) -> int:
        return EncoderConfig(M=self.P, d_pin=self.d_pin, d_h=self.d_h).d_feat

    @property
    def inference_t_mask(self) -> float:
        return self.t_mask if self.mask_at_inference else 0.0

    @classmethod
    def from_run_config(cls, cfg) -> 'RealtimeConfig':
        return cls(P=cfg['P'], t_mask=cfg['t_mask'], d_pin=cfg['d_pin'], d_h=cfg['d_h'], d_e=cfg['d_e'],
                   n_layers=cfg['ranker_layers'], n_heads=cfg['ranker_heads'], d_ffn=cfg['d_ffn'],
                   mask_at_inference=cfg['mask_at_inference'])


@dataclass
class RankRequest:
    long_term: Optional[np.ndarray]
    actions: Sequence[ActionRecord]
    candidate: int
    request_time: int

    def validate(self) -> None:
        if self.long_term is None:
            raise EmptyInputError('rank request has no long-term user embedding')
        for action in self.actions:
            if action.timestamp > self.request_time:
                raise TemporalOrderError(
                    f"real-time action at {action.timestamp} is after request time {self.request_time}"
                )


def time_window_mask(timestamps, request_time: int, t_mask: float) -> np.ndarray:
    """True where an action is old enough to be seen: ``ts <= request_time - t_mask``."""
    stamps = np.asarray(timestamps, dtype=np.float64)
    return stamps <= float(request_time) - float(t_mask)


def init_ranker(params: ParameterSet, cfg: RealtimeConfig, rng: np.random.Generator) -> None:
    params.normal('ranker/candidate_proj/w', (cfg.d_pin, cfg.d_h), rng, INIT_STD)
    params.zeros('ranker/candidate_proj/b', (cfg.d_h,))
    params.normal('ranker/long_term_proj/w', (cfg.d_e, cfg.d_h), rng, INIT_STD)
    params.zeros('ranker/long_term_proj/b', (cfg.d_h,))
    params.normal('ranker/realtime_proj/w', (cfg.d_feat, cfg.d_h), rng, INIT_STD)
    params.zeros('ranker/realtime_proj/b', (cfg.d_h,))
    params.normal('ranker/type_emb', (3, cfg.d_h), rng, INIT_STD)
    add_mhsa(params, 'ranker/realtime/mhsa', cfg.d_h, rng)
    for i in range(cfg.n_layers):
        add_mhsa(params, f"ranker/encoder/layer{i}/mhsa", cfg.d_h, rng)
        add_ffn(params, f"ranker/encoder/layer{i}/ffn", cfg.d_h, cfg.d_ffn, rng)
    add_layer_norm(params, 'ranker/final_ln', cfg.d_h)
    params.normal('ranker/head/w', (cfg.d_h, 1), rng, INIT_STD)
    params.zeros('ranker/head/b', (1,))


def realtime_encode(features, mask: np.ndarray, params: ParameterSet, cfg: RealtimeConfig) -> Tensor:
    """
    One PreNorm attention block over ``[..., P, d_feat]`` real-time features.
    Attention is bidirectional among unmasked tokens; masked rows come out zero.
    """
    x = features if isinstance(features, Tensor) else constant(features)
    mask = np.asarray(mask, dtype=bool)
    h = linear(x, params['ranker/realtime_proj/w'], params['ranker/realtime_proj/b'])
    allowed = np.broadcast_to(mask[..., None, :], mask.shape + mask.shape[-1:])
    h = mhsa_block(h, allowed, params, 'ranker/realtime/mhsa', cfg.n_heads)
    return mul(h, constant(mask[..., None].astype(np.float64)))


def ranker_logits(long_term: np.ndarray, candidates: np.ndarray, rt_features: np.ndarray,
                  rt_mask: np.ndarray, params: ParameterSet, cfg: RealtimeConfig) -> Tensor:
    """Engagement logits ``[B]`` for a batch of (long-term, candidate, real-time) inputs."""
    batch = candidates.shape[0]
    types = params['ranker/type_emb']
    cand = add(linear(constant(candidates), params['ranker/candidate_proj/w'], params['ranker/candidate_proj/b']),
               take(types, ROLE_CANDIDATE))
    lt = add(linear(constant(long_term), params['ranker/long_term_proj/w'], params['ranker/long_term_proj/b']),
             take(types, ROLE_LONG_TERM))
    rt = add(realtime_encode(rt_features, rt_mask, params, cfg), take(types, ROLE_REALTIME))
    tokens = concat([reshape(cand, (batch, 1, cfg.d_h)), reshape(lt, (batch, 1, cfg.d_h)), rt], axis=1)
    valid = np.concatenate([np.ones((batch, 2), dtype=bool), np.asarray(rt_mask, dtype=bool)], axis=1)
    allowed = np.broadcast_to(valid[:, None, :], (batch, valid.shape[1], valid.shape[1]))
    for i in range(cfg.n_layers):
        tokens = mhsa_block(tokens, allowed, params, f"ranker/encoder/layer{i}/mhsa", cfg.n_heads)
        tokens = ffn_block(tokens, params, f"ranker/encoder/layer{i}/ffn")
    head = layer_norm(take(tokens, (slice(None), 0)), params['ranker/final_ln/g'], params['ranker/final_ln/b'])
    return reshape(linear(head, params['ranker/head/w'], params['ranker/head/b']), (batch,))


def realtime_inputs(actions: Sequence[ActionRecord], request_time: int, t_mask: float,
                    cfg: RealtimeConfig, pins: PinCatalog) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-aligned ``[P, d_feat]`` features of the latest P visible actions
    plus their validity. Actions newer than ``request_time - t_mask`` are
    dropped before truncation, so they never take a slot.
    """
    seen = time_window_mask([a.timestamp for a in actions], request_time, t_mask)
    visible = [a for a, ok in zip(actions, seen) if ok]
    kept = recent_actions(visible, request_time, cfg.P)
    features = np.zeros((cfg.P, cfg.d_feat))
    mask = np.zeros(cfg.P, dtype=bool)
    if kept:
        n = len(kept)
        embeddings = pins.embeddings[pins.rows(a.pin_id for a in kept)]
        features[cfg.P - n:] = encode_actions(kept, embeddings, request_time)
        mask[cfg.P - n:] = True
    return features, mask


class RealtimeRanker:
    """Ranker parameters plus the config they were built for."""

    def __init__(self, cfg: RealtimeConfig, params: Optional[ParameterSet] = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = ParameterSet()
            init_ranker(params, cfg, np.random.default_rng([seed, 20]))
        self.params = params

    @classmethod
    def from_run_config(cls, cfg) -> 'RealtimeRanker':
        return cls(RealtimeConfig.from_run_config(cfg), seed=cfg['seed'])

    def score_batch(self, requests: Sequence[RankRequest], pins: PinCatalog,
                    t_mask: Optional[float] = None) -> np.ndarray:
        """Engagement probabilities in (0, 1), one per request."""
        if not requests:
            return np.zeros(0)
        t_mask = self.cfg.inference_t_mask if t_mask is None else t_mask
        long_term, candidates, features, masks = [], [], [], []
        for request in requests:
            request.validate()
            f, m = realtime_inputs(request.actions, request.request_time, t_mask, self.cfg, pins)
            long_term.append(request.long_term)
            candidates.append(pins.embedding(request.candidate))
            features.append(f)
            masks.append(m)
        logits = ranker_logits(np.stack(long_term), np.stack(candidates), np.stack(features),
                               np.stack(masks), self.params, self.cfg)
        return sigmoid(logits).data.astype(np.float64)

    def save(self, path: Union[str, Path], extra: Optional[ParameterSet] = None) -> Path:
        state = dict(self.params.state_dict())
        if extra is not None:
            state.update(extra.state_dict())
        return save_checkpoint(path, state)

    def load(self, path: Union[str, Path]) -> None:
        state = load_checkpoint(path)
        self.params.load_state_dict({k: v for k, v in state.items() if k.startswith('ranker/')})
        logger.info(f"Loaded ranker parameters from {path}")


def rank_score(request: RankRequest, ranker: RealtimeRanker, pins: PinCatalog,
               t_mask: Optional[float] = None) -> float:
    return float(ranker.score_batch([request], pins, t_mask)[0])


# ---------------------------------------------------------------------------
# Replay and training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Impression:
    """One replayed event: the real-time context is ``actions[:index]`` of the user."""

    user_id: int
    index: int
    request_time: int
    candidate: int
    label: float


def replay_impressions(users: Sequence[UserHistory], window_days: float,
                       click_min_duration: float) -> List[Impression]:
    """Every action in the last ``window_days`` of each history becomes a labeled impression."""
    window = int(round(window_days * SECONDS_PER_DAY))
    impressions = []
    for history in sorted(users, key=lambda u: u.user_id):
        if not history.actions:
            continue
        start = history.actions[-1].timestamp - window
        for index, action in enumerate(history.actions):
            if action.timestamp <= start:
                continue
            impressions.append(Impression(history.user_id, index, action.timestamp, action.pin_id,
                                          1.0 if is_positive(action, click_min_duration) else 0.0))
    return impressions


def long_term_embeddings(tower: TwoTowerModel, users: Sequence[UserHistory], pins: PinCatalog,
                         window_days: float) -> Dict[int, np.ndarray]:
    """Tower embedding of each user from the actions before its replay window."""
    window = int(round(window_days * SECONDS_PER_DAY))
    windows, owners = [], []
    for history in users:
        if not history.actions:
            continue
        cut = history.actions[-1].timestamp - window
        try:
            windows.append(build_input_matrix(history, cut, tower.encoder, pins))
        except EmptyInputError:
            continue
        owners.append(history.user_id)
    embeddings = tower.embed_users(windows)
    return {uid: embeddings[i] for i, uid in enumerate(owners)}


def impression_requests(impressions: Sequence[Impression], histories: Dict[int, UserHistory],
                        long_term: Dict[int, np.ndarray]) -> List[RankRequest]:
    return [RankRequest(long_term[imp.user_id], histories[imp.user_id].actions[:imp.index],
                        imp.candidate, imp.request_time)
            for imp in impressions]


@dataclass
class RankerTrainResult:
    ranker: RealtimeRanker
    losses: List[Tuple[int, float]] = field(default_factory=list)
    train_impressions: List[Impression] = field(default_factory=list)
    heldout_impressions: List[Impression] = field(default_factory=list)
    long_term: Dict[int, np.ndarray] = field(default_factory=dict)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))


def train_ranker(world: World, cfg, tower: TwoTowerModel, *, t_mask_choices: Optional[Sequence[float]] = None,
                 shuffle_labels: bool = False, ranker: Optional[RealtimeRanker] = None) -> RankerTrainResult:
    """
    Fit the ranker with binary cross-entropy on replayed impressions of the
    training users. Each example draws its training mask from ``t_mask_choices``.
    ``labels`` on the result are the per-impression training labels, permuted
    across impressions when ``shuffle_labels`` is set.
    """
    ranker = ranker or RealtimeRanker.from_run_config(cfg)
    choices = np.asarray(t_mask_choices if t_mask_choices is not None else cfg.float_list('t_mask_choices'),
                         dtype=np.float64)
    if not choices.size or np.any(choices < 0):
        raise ConfigError(f"t_mask_choices must be non-negative seconds, got {choices.tolist()}")
    train, heldout = partition_users(world.users, cfg['holdout_fraction'])
    window_days = cfg['ranker_window_days']
    long_term = long_term_embeddings(tower, world.users, world.pins, window_days)
    histories = {u.user_id: u for u in world.users}
    train_imps = [imp for imp in replay_impressions(train, window_days, cfg['click_min_duration'])
                  if imp.user_id in long_term]
    heldout_imps = [imp for imp in replay_impressions(heldout, window_days, cfg['click_min_duration'])
                    if imp.user_id in long_term]
    if not train_imps:
        raise EmptyInputError('no replayable impressions in the training users')
    labels = np.array([imp.label for imp in train_imps])
    if shuffle_labels:
        labels = np.random.default_rng([cfg['seed'], _SHUFFLE_STREAM]).permutation(labels)

    result = RankerTrainResult(ranker, train_impressions=train_imps, heldout_impressions=heldout_imps,
                               long_term=long_term, labels=labels)
    optimizer = Adam(list(ranker.params), lr=cfg['learning_rate'], beta1=cfg['beta1'],
                     beta2=cfg['beta2'], eps=cfg['adam_eps'])
    batch_size = cfg['ranker_batch_size']
    logger.info(f"Training ranker: steps={cfg['ranker_steps']} impressions={len(train_imps)} "
                f"t_mask_choices={choices.tolist()}")
    for step in range(1, cfg['ranker_steps'] + 1):
        rng = np.random.default_rng([cfg['seed'], _TRAIN_STREAM, step])
        picks = rng.choice(len(train_imps), size=batch_size, replace=len(train_imps) < batch_size)
        masks_s = rng.choice(choices, size=batch_size)
        lt, cand, feats, masks = [], [], [], []
        for index, t_mask in zip(picks, masks_s):
            imp = train_imps[int(index)]
            f, m = realtime_inputs(histories[imp.user_id].actions[:imp.index], imp.request_time,
                                   float(t_mask), ranker.cfg, world.pins)
            lt.append(long_term[imp.user_id])
            cand.append(world.pins.embedding(imp.candidate))
            feats.append(f)
            masks.append(m)
        optimizer.zero_grad()
        with Tape() as tape:
            logits = ranker_logits(np.stack(lt), np.stack(cand), np.stack(feats), np.stack(masks),
                                   ranker.params, ranker.cfg)
            loss = bce_with_logits(logits, labels[picks])
        if not is_finite(loss):
            raise NumericalError(f"non-finite ranker loss at step {step}")
        tape.backward(loss)
        optimizer.step()
        result.losses.append((step, loss.item()))
        if step % cfg['log_every'] == 0 or step == cfg['ranker_steps']:
            logger.info(f"ranker step={step} loss={loss.item():.6f}")
    return result


def score_impressions(ranker: RealtimeRanker, impressions: Sequence[Impression], world: World,
                      long_term: Dict[int, np.ndarray], t_mask: Optional[float] = None,
                      batch_size: int = 256) -> np.ndarray:
    histories = {u.user_id: u for u in world.users}
    requests = impression_requests(impressions, histories, long_term)
    chunks = [ranker.score_batch(requests[i:i + batch_size], world.pins, t_mask)
              for i in range(0, len(requests), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros(0)


# ---------------------------------------------------------------------------
# Responsiveness
# ---------------------------------------------------------------------------

def responsiveness(ranker: RealtimeRanker, long_term: np.ndarray, actions: Sequence[ActionRecord],
                   category: int, probe_pins: Sequence[int], engaged_pin: int, request_time: int,
                   pins: PinCatalog, t_mask: Optional[float] = None) -> float:
    """
    Mean rank gain of the category's probe pins after one fresh engagement
    with ``engaged_pin`` one second before the request. Rank 1 is the best
    score; a positive value means the category moved up.
    """
    probe_pins = list(probe_pins)
    topics = {pins.topic(p) for p in probe_pins}
    if len(topics) < 2:
        raise ConfigError(f"probe set spans {len(topics)} categories; need at least 2")
    in_category = np.array([pins.topic(p) == category for p in probe_pins])
    if not in_category.any():
        raise ConfigError(f"no probe pin belongs to category {category}")

    def ranks(context: Sequence[ActionRecord]) -> np.ndarray:
        requests = [RankRequest(long_term, context, pin, request_time) for pin in probe_pins]
        return rankdata(-ranker.score_batch(requests, pins, t_mask), method='average')

    fresh = ActionRecord(pin_id=engaged_pin, timestamp=request_time - 1, action_type=ActionType.REPIN,
                         duration=5.0, surface=Surface.HOMEFEED)
    before = ranks(actions)
    after = ranks(list(actions) + [fresh])
    return float(np.mean(before[in_category] - after[in_category]))


def probe_set(pins: PinCatalog, per_topic: int, seed: int) -> List[int]:
    """``per_topic`` pins from every topic, drawn deterministically."""
    rng = np.random.default_rng([seed, _PROBE_STREAM])
    probes: List[int] = []
    for topic in range(pins.n_topics):
        members = pins.in_topic(topic)
        k = min(per_topic, len(members))
        probes.extend(int(p) for p in np.sort(rng.choice(members, size=k, replace=False)))
    return probes


def mean_responsiveness(ranker: RealtimeRanker, world: World, users: Sequence[UserHistory],
                        long_term: Dict[int, np.ndarray], *, seed: int, per_topic: int = 4,
                        max_users: int = 40, t_mask: Optional[float] = None) -> float:
    """Average ``responsiveness`` over probe users, each with a random engaged category."""
    probes = probe_set(world.pins, per_topic, seed)
    probe_ids = set(probes)
    rng = np.random.default_rng([seed, _PROBE_STREAM, 1])
    values = []
    for history in [u for u in users if u.user_id in long_term and u.actions][:max_users]:
        category = int(rng.integers(0, world.pins.n_topics))
        candidates = [int(p) for p in world.pins.in_topic(category) if int(p) not in probe_ids]
        engaged = int(rng.choice(candidates)) if candidates else int(world.pins.in_topic(category)[0])
        request_time = history.actions[-1].timestamp + 60
        values.append(responsiveness(ranker, long_term[history.user_id], history.actions, category,
                                     probes, engaged, request_time, world.pins, t_mask))
    return float(np.mean(values)) if values else 0.0


# ---------------------------------------------------------------------------
# Serving
# ---------------------------------------------------------------------------

def rank_candidates(ranker: RealtimeRanker, tower: TwoTowerModel, world: World, user_id: int,
                    candidates: Sequence[int], request_time: Optional[int] = None,
                    t_mask: Optional[float] = None, window_days: float = 28) -> List[Tuple[int, float]]:
    """
    Score ``candidates`` for one user and return ``(pin_id, score)`` pairs,
    best first (ties by ascending id). The long-term embedding is computed
    from the actions before ``request_time - window_days``; the real-time
    sequence is every action up to ``request_time``.
    """
    try:
        history = world.user(user_id)
    except KeyError as exc:
        raise EmptyInputError(str(exc).strip("'")) from None
    if not candidates:
        raise EmptyInputError('no candidates to rank')
    unknown = [pin for pin in candidates if pin not in world.pins]
    if unknown:
        raise EmptyInputError(f"unknown candidate pin ids: {unknown[:10]}")
    if request_time is None:
        request_time = history.actions[-1].timestamp + 1 if history.actions else 0
    actions = [a for a in history.actions if a.timestamp <= request_time]
    cut = request_time - int(round(window_days * SECONDS_PER_DAY))
    long_term = tower.embed_users([build_input_matrix(actions, cut, tower.encoder, world.pins)])[0]
    requests = [RankRequest(long_term, actions, int(pin), request_time) for pin in candidates]
    scores = ranker.score_batch(requests, world.pins, t_mask)
    order = np.lexsort((np.asarray(candidates), -scores))
    return [(int(candidates[i]), float(scores[i])) for i in order]


def load_models(cfg, path: Union[str, Path]) -> Tuple[TwoTowerModel, RealtimeRanker]:
    """Tower and ranker built from ``cfg`` with parameters from one checkpoint."""
    state = load_checkpoint(path)
    if not any(name.startswith('ranker/') for name in state):
        raise CheckpointError(f"{path} holds no ranker parameters; train with --train_ranker true")
    tower = TwoTowerModel.from_run_config(cfg)
    tower.params.load_state_dict({k: v for k, v in state.items() if not k.startswith('ranker/')})
    ranker = RealtimeRanker.from_run_config(cfg)
    ranker.params.load_state_dict({k: v for k, v in state.items() if k.startswith('ranker/')})
    logger.info(f"Loaded tower and ranker from {path}")
    return tower, ranker
