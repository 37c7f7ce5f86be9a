"""
Two-tower training loop.

One step samples a batch of training users, cuts each history (at a random
action, or at one shared horizon cut under ``cut_policy=horizon_end``), encodes the window, builds per-position targets for the configured
loss, samples negatives and applies one Adam update to both towers.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasynth import PinCatalog, UserHistory, World, generate_world, horizon_cut, partition_users
from .encoder import EncoderConfig, InputWindow, build_input_matrix
from .exceptions import ConfigError, EmptyInputError, NumericalError, SkipBatch
from .model import TransformerConfig, TwoTowerModel
from .numerics import Adam, GradCheckReport, Tape, Tensor, float_width, grad_check, is_finite
from .objective import (
    LOSS_FUNCTIONS,
    ObjectiveConfig,
    PositionTargets,
    make_pin_table,
    sample_negatives,
    targets_for,
)

logger = logging.getLogger(__name__)

# Random stream tags; every stream is keyed by (seed, tag, counter).
_BATCH_STREAM = 3

CUT_POLICIES = ('random', 'horizon_end')


@dataclass
class TrainBatch:
    user_ids: List[int]
    windows: List[InputWindow]
    targets: List[PositionTargets]
    negatives: List[np.ndarray]
    pin_ids: np.ndarray


@dataclass
class TrainResult:
    model: TwoTowerModel
    losses: List[Tuple[int, float]] = field(default_factory=list)
    skipped: int = 0
    train_users: List[int] = field(default_factory=list)
    heldout_users: List[int] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1][1] if self.losses else None

    def loss_log(self) -> str:
        return ''.join(f"step={step} loss={loss:.6f}\n" for step, loss in self.losses)

    def write_loss_log(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.loss_log())
        return path


def trainable_users(users: Sequence[UserHistory]) -> List[UserHistory]:
    """Users with at least one action after their first, so a cut leaves a future."""
    return [u for u in users if len(u.actions) >= 2]


def make_batch(users: Sequence[UserHistory], pins: PinCatalog, model: TwoTowerModel,
               objective: ObjectiveConfig, batch_size: int, seed: int, step: int,
               cut: Optional[int] = None) -> TrainBatch:
    """
    Sample ``batch_size`` users and encode their windows. Each history is cut
    at a random action unless a shared ``cut`` timestamp is given; users with
    nothing at or before it are dropped from the batch.
    """
    rng = np.random.default_rng([seed, _BATCH_STREAM, step])
    picks = rng.choice(len(users), size=batch_size, replace=len(users) < batch_size)
    user_ids, windows, targets = [], [], []
    for index in picks:
        history = users[int(index)]
        at = history.actions[int(rng.integers(0, len(history.actions) - 1))].timestamp if cut is None else cut
        try:
            window = build_input_matrix(history, at, model.encoder, pins)
        except EmptyInputError:
            continue
        user_ids.append(history.user_id)
        windows.append(window)
        targets.append(targets_for(objective.loss_kind, window.timestamps, window.mask,
                                   history.actions, objective))
    if not windows:
        raise SkipBatch(f"no user in batch {step} has actions at or before the cut")
    negatives = sample_negatives(targets, pins.ids, objective, seed, epoch=0, batch_index=step)
    needed = {pin for example in targets for position in example for pin in position}
    for drawn in negatives:
        needed.update(drawn.tolist())
    return TrainBatch(user_ids, windows, targets, negatives, np.array(sorted(needed), dtype=np.int64))


def batch_loss(model: TwoTowerModel, batch: TrainBatch, pins: PinCatalog,
               objective: ObjectiveConfig) -> Tensor:
    tower_out = model.user_forward(batch.windows)
    pin_out = model.pin_forward(pins.embeddings[pins.rows(batch.pin_ids)])
    table = make_pin_table(batch.pin_ids, pin_out)
    return LOSS_FUNCTIONS[objective.loss_kind](tower_out, batch.targets, table, batch.negatives, objective)


def training_cut(users: Sequence[UserHistory], policy: str, window_days: float) -> Optional[int]:
    """The shared tower-training cut for ``policy``, or None for a per-example random cut."""
    if policy == 'random':
        return None
    if policy == 'horizon_end':
        return horizon_cut(users, window_days)
    raise ConfigError(f"unknown cut_policy '{policy}' (expected one of {', '.join(CUT_POLICIES)})")


def train_towers(world: World, cfg, model: Optional[TwoTowerModel] = None,
                 on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train user and pin towers on the non-held-out users of ``world``."""
    objective = ObjectiveConfig.from_run_config(cfg)
    model = model or TwoTowerModel.from_run_config(cfg)
    train, heldout = partition_users(world.users, cfg['holdout_fraction'])
    users = trainable_users(train)
    result = TrainResult(model=model, train_users=[u.user_id for u in train],
                         heldout_users=[u.user_id for u in heldout])
    if not users:
        logger.warning("No trainable users; skipping tower training")
        return result

    cut = training_cut(world.users, cfg['cut_policy'], cfg['window_days'])
    optimizer = Adam(list(model.params), lr=cfg['learning_rate'], beta1=cfg['beta1'],
                     beta2=cfg['beta2'], eps=cfg['adam_eps'])
    logger.info(f"Training towers: loss={objective.loss_kind} steps={cfg['train_steps']} "
                f"users={len(users)} batch={cfg['batch_size']} cut_policy={cfg['cut_policy']}")
    for step in range(1, cfg['train_steps'] + 1):
        optimizer.zero_grad()
        with Tape() as tape:
            try:
                batch = make_batch(users, world.pins, model, objective, cfg['batch_size'], cfg['seed'],
                                   step, cut=cut)
                loss = batch_loss(model, batch, world.pins, objective)
            except SkipBatch:
                result.skipped += 1
                logger.debug(f"step={step} skipped: no usable windows or (position, target) pairs")
                continue
        if not is_finite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        tape.backward(loss)
        optimizer.step()
        value = loss.item()
        result.losses.append((step, value))
        if on_step is not None:
            on_step(step, value)
        if step % cfg['log_every'] == 0 or step == cfg['train_steps']:
            logger.info(f"step={step} loss={value:.6f}")
    if result.skipped:
        logger.info(f"Skipped {result.skipped} batches without targets")
    return result


def check_model_gradients(seed: int = 0, max_coords: Optional[int] = 400,
                          tolerance: float = 1e-4, loss_kind: str = 'dense_all_action') -> GradCheckReport:
    """
    Finite-difference check of both towers under one loss on a tiny seeded
    world, in 64-bit. Parameters are redrawn with a wide spread so no
    coordinate sits in a flat region.
    """
    with float_width(64):
        world = generate_world(seed, n_topics=3, n_pins=40, n_users=4, d_pin=4, horizon_days=20,
                               actions_per_day=2.0)
        model = TwoTowerModel(EncoderConfig(M=6, d_pin=4, d_h=8),
                              TransformerConfig(n_layers=2, n_heads=2, d_h=8, d_ffn=16, d_e=4), seed=seed)
        rng = np.random.default_rng([seed, 30])
        for param in model.params:
            param.data = param.data + rng.normal(0.0, 0.3, size=param.shape)
        objective = ObjectiveConfig(n_random_negatives=5, loss_kind=loss_kind)
        batch = make_batch(trainable_users(world.users), world.pins, model, objective,
                           batch_size=3, seed=seed, step=1)
        return grad_check(lambda: batch_loss(model, batch, world.pins, objective), list(model.params),
                          max_coords=max_coords, tolerance=tolerance, seed=seed)
