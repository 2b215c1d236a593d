"""Line-oriented `key = value` run configuration.

Keys cover the model shape, the training schedule and the data paths.
Unknown keys are hard errors; `#` starts a comment. Serialization is the
exact inverse of parsing.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import HyperParams
from .train import TrainConfig


class ConfigError(ValueError):
    """Configuration file is malformed or inconsistent."""


_HYPER_KEYS = {
    "vocab_size": int, "emb_dim": int, "num_filters": int, "window": int,
    "review_len": int, "reviews_per_entity": int, "factor_dim": int,
    "attn_dim": int, "conv_activation": str,
}
_TRAIN_KEYS = {
    "learning_rate": float, "batch_size": int, "max_epochs": int,
    "patience": int, "adam_beta1": float, "adam_beta2": float,
    "adam_eps": float, "seed": int, "model": str, "clip_grad_norm": float,
}
_PATH_KEYS = ("train_path", "val_path", "test_path")

KEY_ORDER = tuple(_HYPER_KEYS) + tuple(_TRAIN_KEYS) + _PATH_KEYS


@dataclass
class RunConfig:
    hyper: HyperParams
    training: TrainConfig
    train_path: str = ""
    val_path: str = ""
    test_path: str = ""

    def value_of(self, key: str):
        if key in _HYPER_KEYS:
            return getattr(self.hyper, key)
        if key in _TRAIN_KEYS:
            return getattr(self.training, key)
        return getattr(self, key)


def default_config() -> RunConfig:
    return RunConfig(hyper=HyperParams(vocab_size=20000), training=TrainConfig())


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown keys and repeated keys are errors."""
    seen: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEY_ORDER:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = value

    def typed(key, kind):
        value = seen.pop(key, None)
        if value is None:
            return None
        try:
            return kind(value)
        except ValueError as err:
            raise ConfigError(f"key {key!r}: {err}") from err

    hyper_kwargs = {k: v for k in _HYPER_KEYS
                    if (v := typed(k, _HYPER_KEYS[k])) is not None}
    train_kwargs = {k: v for k in _TRAIN_KEYS
                    if (v := typed(k, _TRAIN_KEYS[k])) is not None}
    paths = {k: seen.pop(k, "") for k in _PATH_KEYS}
    hyper_kwargs.setdefault("vocab_size", 20000)
    try:
        return RunConfig(hyper=HyperParams(**hyper_kwargs),
                         training=TrainConfig(**train_kwargs), **paths)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key in KEY_ORDER:
        value = cfg.value_of(key)
        if key in _PATH_KEYS and not value:
            continue
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def read_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
