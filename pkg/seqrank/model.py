"""
Two-tower retrieval model

The user tower is a causal PreNorm transformer over the encoded action
window; every position emits an L2-normalized embedding. The pin tower is an
MLP over pin content embeddings, normalized into the same space.

Parameter names::

    user_tower/input_proj/{w,b}
    user_tower/pos_table
    user_tower/layer<i>/mhsa/{ln/g,ln/b,wq,wk,wv,wo,bo}
    user_tower/layer<i>/ffn/{ln/g,ln/b,w1,b1,w2,b2}
    user_tower/final_ln/{g,b}
    user_tower/head/{w1,b1,w2,b2}
    pin_tower/{w1,b1,w2,b2}
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, InputWindow, apply_positional_encoding, leading_positions
from .exceptions import ConfigError, ShapeError
from .numerics import (
    ParameterSet,
    Tensor,
    add,
    bmm,
    constant,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    masked_fill,
    mul,
    permute,
    reshape,
    scale,
    softmax_rows,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int
    n_heads: int
    d_h: int
    d_ffn: int
    d_e: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.n_heads < 1 or self.d_h % self.n_heads:
            raise ConfigError(f"d_h ({self.d_h}) must be divisible by n_heads ({self.n_heads})")
        if self.d_e < 2:
            raise ConfigError(f"d_e must be at least 2, got {self.d_e}")
        if self.n_layers < 0 or self.d_ffn < 1:
            raise ConfigError(f"invalid n_layers={self.n_layers} d_ffn={self.d_ffn}")
        if self.dropout_rate != 0.0:
            raise ConfigError("dropout is not supported; dropout_rate must be 0")

    @classmethod
    def from_run_config(cls, cfg) -> 'TransformerConfig':
        return cls(n_layers=cfg['n_layers'], n_heads=cfg['n_heads'], d_h=cfg['d_h'],
                   d_ffn=cfg['d_ffn'], d_e=cfg['d_e'])


@dataclass
class UserTowerOutput:
    embeddings: Tensor
    mask: np.ndarray

    def last_valid(self) -> np.ndarray:
        """Embedding at the most recent valid position of every sequence."""
        data = self.embeddings.data
        mask = self.mask
        if data.ndim == 2:
            return data[np.flatnonzero(mask)[-1]]
        last = np.array([np.flatnonzero(row)[-1] for row in mask])
        return data[np.arange(data.shape[0]), last]


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def add_layer_norm(params: ParameterSet, prefix: str, width: int) -> None:
    params.ones(f"{prefix}/g", (width,))
    params.zeros(f"{prefix}/b", (width,))


def add_mhsa(params: ParameterSet, prefix: str, d_h: int, rng: np.random.Generator) -> None:
    add_layer_norm(params, f"{prefix}/ln", d_h)
    for slot in ('wq', 'wk', 'wv', 'wo'):
        params.normal(f"{prefix}/{slot}", (d_h, d_h), rng, INIT_STD)
    params.zeros(f"{prefix}/bo", (d_h,))


def add_ffn(params: ParameterSet, prefix: str, d_h: int, d_ffn: int, rng: np.random.Generator) -> None:
    add_layer_norm(params, f"{prefix}/ln", d_h)
    params.normal(f"{prefix}/w1", (d_h, d_ffn), rng, INIT_STD)
    params.zeros(f"{prefix}/b1", (d_ffn,))
    params.normal(f"{prefix}/w2", (d_ffn, d_h), rng, INIT_STD)
    params.zeros(f"{prefix}/b2", (d_h,))


def add_mlp(params: ParameterSet, prefix: str, d_in: int, d_hidden: int, d_out: int,
            rng: np.random.Generator) -> None:
    params.normal(f"{prefix}/w1", (d_in, d_hidden), rng, INIT_STD)
    params.zeros(f"{prefix}/b1", (d_hidden,))
    params.normal(f"{prefix}/w2", (d_hidden, d_out), rng, INIT_STD)
    params.zeros(f"{prefix}/b2", (d_out,))


def init_user_tower(params: ParameterSet, encoder: EncoderConfig, cfg: TransformerConfig,
                    rng: np.random.Generator) -> None:
    params.normal('user_tower/input_proj/w', (encoder.d_feat, cfg.d_h), rng, INIT_STD)
    params.zeros('user_tower/input_proj/b', (cfg.d_h,))
    params.normal('user_tower/pos_table', (encoder.M, cfg.d_h), rng, INIT_STD)
    for i in range(cfg.n_layers):
        add_mhsa(params, f"user_tower/layer{i}/mhsa", cfg.d_h, rng)
        add_ffn(params, f"user_tower/layer{i}/ffn", cfg.d_h, cfg.d_ffn, rng)
    add_layer_norm(params, 'user_tower/final_ln', cfg.d_h)
    add_mlp(params, 'user_tower/head', cfg.d_h, cfg.d_h, cfg.d_e, rng)


def init_pin_tower(params: ParameterSet, d_pin: int, cfg: TransformerConfig,
                   rng: np.random.Generator) -> None:
    add_mlp(params, 'pin_tower', d_pin, cfg.d_h, cfg.d_e, rng)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def causal_mask(M: int, validity: np.ndarray) -> np.ndarray:
    """
    Boolean attention mask: ``[i, j]`` is allowed iff ``j <= i`` and
    ``validity[j]``. A 2-D ``validity`` (batch of sequences) yields ``[B, M, M]``.
    """
    validity = np.asarray(validity, dtype=bool)
    if validity.shape[-1] != M:
        raise ShapeError(f"validity of length {validity.shape[-1]} for M={M}")
    lower = np.tril(np.ones((M, M), dtype=bool))
    return lower & validity[..., None, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return reshape(permute(reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3)),
                   (b * n_heads, length, d // n_heads))


def _merge_heads(x: Tensor, batch: int, n_heads: int) -> Tensor:
    _, length, d_k = x.shape
    return reshape(permute(reshape(x, (batch, n_heads, length, d_k)), (0, 2, 1, 3)),
                   (batch, length, n_heads * d_k))


def attention(x: Tensor, allowed: np.ndarray, params: ParameterSet, prefix: str, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over a ``[B, L, d]`` input."""
    batch, length, d_h = x.shape
    if d_h % n_heads:
        raise ShapeError(f"hidden width {d_h} is not divisible by {n_heads} heads")
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), (batch, length, length))
    live = allowed.any(axis=-1)
    # Rows with nothing to attend to get a placeholder mask; their output is zeroed below.
    safe = np.where(live[..., None], allowed, True)
    safe = np.repeat(safe[:, None], n_heads, axis=1).reshape(batch * n_heads, length, length)

    q = _split_heads(linear(x, params[f"{prefix}/wq"]), n_heads)
    k = _split_heads(linear(x, params[f"{prefix}/wk"]), n_heads)
    v = _split_heads(linear(x, params[f"{prefix}/wv"]), n_heads)
    scores = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(d_h // n_heads))
    weights = softmax_rows(masked_fill(scores, safe))
    context = _merge_heads(bmm(weights, v), batch, n_heads)
    out = linear(context, params[f"{prefix}/wo"], params[f"{prefix}/bo"])
    return mul(out, constant(live[..., None].astype(np.float64)))


def _with_batch(x: Tensor):
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def mhsa_block(x: Tensor, mask: np.ndarray, params: ParameterSet, prefix: str, n_heads: int) -> Tensor:
    """PreNorm residual attention: ``x + MHSA(LayerNorm(x))``."""
    xb, squeezed = _with_batch(x)
    h = layer_norm(xb, params[f"{prefix}/ln/g"], params[f"{prefix}/ln/b"])
    y = add(xb, attention(h, mask, params, prefix, n_heads))
    return reshape(y, x.shape) if squeezed else y


def ffn_block(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """PreNorm residual position-wise FFN with GELU."""
    h = layer_norm(x, params[f"{prefix}/ln/g"], params[f"{prefix}/ln/b"])
    inner = gelu(linear(h, params[f"{prefix}/w1"], params[f"{prefix}/b1"]))
    return add(x, linear(inner, params[f"{prefix}/w2"], params[f"{prefix}/b2"]))


def mlp(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    hidden = gelu(linear(x, params[f"{prefix}/w1"], params[f"{prefix}/b1"]))
    return linear(hidden, params[f"{prefix}/w2"], params[f"{prefix}/b2"])


# ---------------------------------------------------------------------------
# Towers
# ---------------------------------------------------------------------------

def user_tower_forward(features, validity: np.ndarray, params: ParameterSet,
                       cfg: TransformerConfig) -> UserTowerOutput:
    """
    Embed every position of one (``[L, d_feat]``) or a batch
    (``[B, L, d_feat]``) of input windows. ``L`` may be shorter than the
    positional table; the leading table rows are used.
    """
    x = features if isinstance(features, Tensor) else constant(features)
    validity = np.asarray(validity, dtype=bool)
    if validity.shape != x.shape[:-1]:
        raise ShapeError(f"validity {list(validity.shape)} does not match input {list(x.shape)}")
    length = x.shape[-2]
    h = linear(x, params['user_tower/input_proj/w'], params['user_tower/input_proj/b'])
    h = apply_positional_encoding(h, leading_positions(params['user_tower/pos_table'], length))
    allowed = causal_mask(length, validity)
    for i in range(cfg.n_layers):
        h = mhsa_block(h, allowed, params, f"user_tower/layer{i}/mhsa", cfg.n_heads)
        h = ffn_block(h, params, f"user_tower/layer{i}/ffn")
    h = layer_norm(h, params['user_tower/final_ln/g'], params['user_tower/final_ln/b'])
    out = l2_normalize(mlp(h, params, 'user_tower/head'))
    out = mul(out, constant(validity[..., None].astype(np.float64)))
    return UserTowerOutput(out, validity)


def pin_tower_forward(pin_embeddings, params: ParameterSet) -> Tensor:
    x = pin_embeddings if isinstance(pin_embeddings, Tensor) else constant(pin_embeddings)
    expected = params['pin_tower/w1'].shape[0]
    if x.shape[-1] != expected:
        raise ShapeError(f"pin tower expects width {expected}, got {x.shape[-1]}")
    return l2_normalize(mlp(x, params, 'pin_tower'))


class TwoTowerModel:
    """User and pin towers sharing one ``ParameterSet``."""

    def __init__(self, encoder: EncoderConfig, transformer: TransformerConfig,
                 params: Optional[ParameterSet] = None, seed: int = 0):
        self.encoder = encoder
        self.transformer = transformer
        if params is None:
            rng = np.random.default_rng([seed, 10])
            params = ParameterSet()
            init_user_tower(params, encoder, transformer, rng)
            init_pin_tower(params, encoder.d_pin, transformer, rng)
        self.params = params

    @classmethod
    def from_run_config(cls, cfg) -> 'TwoTowerModel':
        return cls(EncoderConfig.from_run_config(cfg), TransformerConfig.from_run_config(cfg),
                   seed=cfg['seed'])

    def user_forward(self, windows: Sequence[InputWindow]) -> UserTowerOutput:
        features = np.stack([w.features for w in windows])
        masks = np.stack([w.mask for w in windows])
        return user_tower_forward(features, masks, self.params, self.transformer)

    def pin_forward(self, pin_embeddings) -> Tensor:
        return pin_tower_forward(pin_embeddings, self.params)

    def embed_users(self, windows: Sequence[InputWindow], batch_size: int = 64) -> np.ndarray:
        """Long-term embedding (last valid position) per window, without recording."""
        chunks = [self.user_forward(windows[i:i + batch_size]).last_valid()
                  for i in range(0, len(windows), batch_size)]
        if not chunks:
            return np.zeros((0, self.transformer.d_e))
        return np.concatenate(chunks).astype(np.float64)

    def embed_pins(self, pin_embeddings: np.ndarray) -> np.ndarray:
        return self.pin_forward(pin_embeddings).data.astype(np.float64)

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.params)

    def load(self, path: Union[str, Path]) -> None:
        state = load_checkpoint(path)
        towers = {k: v for k, v in state.items() if k.startswith(('user_tower/', 'pin_tower/'))}
        self.params.load_state_dict(towers)
        logger.info(f"Loaded two-tower parameters from {path}")
