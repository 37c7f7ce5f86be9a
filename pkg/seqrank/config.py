"""
RunConfig - the flat key/value configuration shared by every subcommand

Resolution order is flag > config file > default. Defaults and their
documentation live in ``settings.SEQRANK_RUN_DEFAULTS``; a key that is not
listed there is rejected wherever it appears.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Union

from django.conf import settings

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def run_defaults() -> Dict[str, Any]:
    return dict(settings.SEQRANK_RUN_DEFAULTS)


def coerce(key: str, value: Any, default: Any) -> Any:
    """Convert ``value`` to the type of ``default``."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"config key '{key}': expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value) if not isinstance(value, str) else int(value.strip(), 0)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(
            f"config key '{key}': expected {type(default).__name__}, got {value!r}"
        ) from None
    return str(value).strip()


def parse_config_text(text: str, source: str = '<string>') -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


class RunConfig(Mapping):
    """
    Immutable resolved configuration.

    Values are typed like their defaults; list-valued keys (``seeds``,
    ``recall_ks``, ``t_mask_choices``) are kept as comma-separated strings and
    read through ``int_list`` / ``float_list``.
    """

    def __init__(self, values: Mapping[str, Any]):
        self._values = dict(values)

    @classmethod
    def resolve(cls, config_file: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> 'RunConfig':
        defaults = run_defaults()
        values = dict(defaults)
        layers = []
        if config_file:
            path = Path(config_file)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
            layers.append((str(path), parse_config_text(text, str(path))))
        if overrides:
            layers.append(('flags', {k: v for k, v in overrides.items() if v is not None}))
        for source, layer in layers:
            unknown = sorted(set(layer) - set(defaults))
            if unknown:
                raise ConfigError(f"unknown config keys from {source}: {', '.join(unknown)}")
            for key, value in layer.items():
                values[key] = coerce(key, value, defaults[key])
        config = cls(values)
        config.validate()
        return config

    def validate(self) -> None:
        positive = ['n_topics', 'n_pins', 'n_users', 'horizon_days', 'M', 'P', 'd_h',
                    'n_layers', 'n_heads', 'd_ffn', 'batch_size', 'ranker_batch_size']
        for key in positive:
            if self[key] < 1:
                raise ConfigError(f"config key '{key}' must be positive, got {self[key]}")
        if self['d_pin'] < 2:
            raise ConfigError(f"d_pin must be at least 2, got {self['d_pin']}")
        if self['d_e'] < 2:
            raise ConfigError(f"d_e must be at least 2, got {self['d_e']}")
        if self['n_topics'] > self['n_pins']:
            raise ConfigError(f"n_topics ({self['n_topics']}) exceeds n_pins ({self['n_pins']})")
        if self['d_h'] % self['n_heads'] or self['d_h'] % self['ranker_heads']:
            raise ConfigError(f"d_h ({self['d_h']}) must be divisible by the head counts")
        if self['temperature'] <= 0:
            raise ConfigError(f"temperature must be positive, got {self['temperature']}")
        if self['window_days'] <= 0 or self['eval_window_days'] <= 0:
            raise ConfigError("window lengths must be positive")
        if self['t_mask'] < 0:
            raise ConfigError(f"t_mask must be non-negative, got {self['t_mask']}")
        if self['loss_kind'] not in ('dense_all_action', 'all_action', 'next_action'):
            raise ConfigError(f"unknown loss_kind '{self['loss_kind']}'")
        if self['cut_policy'] not in ('random', 'horizon_end'):
            raise ConfigError(f"unknown cut_policy '{self['cut_policy']}' (expected random or horizon_end)")
        if self['float_width'] not in (32, 64):
            raise ConfigError(f"float_width must be 32 or 64, got {self['float_width']}")
        if not 0.0 <= self['holdout_fraction'] < 1.0:
            raise ConfigError(f"holdout_fraction must be in [0, 1), got {self['holdout_fraction']}")

    def __getitem__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key '{key}'") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **changes: Any) -> 'RunConfig':
        defaults = run_defaults()
        unknown = sorted(set(changes) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(self._values)
        values.update({k: coerce(k, v, defaults[k]) for k, v in changes.items()})
        config = RunConfig(values)
        config.validate()
        return config

    def int_list(self, key: str) -> List[int]:
        return [int(part) for part in str(self[key]).split(',') if part.strip()]

    def float_list(self, key: str) -> List[float]:
        return [float(part) for part in str(self[key]).split(',') if part.strip()]

    def to_text(self) -> str:
        return ''.join(f"{key} = {self._values[key]}\n" for key in sorted(self._values))

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path
