"""Training configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

ADV_FORMS = ("equations", "algorithm1")
_ALIASES = {
    "text_encoder.backend": "text_backend",
    "text_encoder.path": "text_path",
    "lr": "learning_rate",
}


@dataclass
class TrainConfig:
    # optimisation (full-scale defaults)
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    epochs: int = 500
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # separator
    l: float = 0.5
    C: int = 64
    L_e: int = 8
    L_t: int = 128
    K: int = 64
    T: int = 8
    heads: int = 4
    raw_dim: int = 256
    text_backend: str = "stub"
    text_path: str = ""
    text_seed: int = 0
    # generator
    W_style: int = 256
    mapper_layers: int = 8
    # loss form and ablation toggles
    adv_loss_form: str = "equations"
    use_vq: bool = True
    use_sim_g: bool = True
    use_sim_d: bool = True
    use_rec: bool = True
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-sized run: 30 epochs, batch 16, a learning rate the short
        schedule can actually move."""
        base = dict(learning_rate=3e-3, epochs=30, batch_size=16)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 < self.l < 1:
            raise ConfigError("l must be in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.L_e * 2 ** 9 != 4096:
            raise ConfigError("L_e * 2^9 must equal 4096 (nine x2 decoder upsamplings)")
        if self.T < 1 or self.L_t % self.T:
            raise ConfigError("L_t must be divisible by the number of text tokens T")
        if self.heads < 1 or self.L_e % self.heads:
            raise ConfigError("L_e must be divisible by heads")
        if self.K < 1:
            raise ConfigError("codebook size K must be >= 1")
        if self.adv_loss_form not in ADV_FORMS:
            raise ConfigError(f"adv_loss_form must be one of {ADV_FORMS}")
        if self.text_backend not in ("stub", "external"):
            raise ConfigError("text_encoder.backend must be 'stub' or 'external'")
        if self.mapper_layers < 1:
            raise ConfigError("mapper_layers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, mapping: dict) -> "TrainConfig":
        return dataclasses.replace(self, **coerce(mapping))


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def _parse_bool(key: str, raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def coerce(mapping: dict) -> dict:
    """Map raw (string or typed) values onto TrainConfig field types.

    Unknown keys raise :class:`ConfigError`.
    """
    types = _field_types()
    out = {}
    for key, raw in mapping.items():
        name = _ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        typ = types[name]
        if not isinstance(raw, str):
            out[name] = typ(raw)
            continue
        try:
            if typ is bool:
                out[name] = _parse_bool(key, raw)
            else:
                out[name] = typ(raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return out


def parse_kv_lines(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    """File values, then overrides (last wins), then ``LAVQ_SEED``."""
    cfg = base or TrainConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_kv_lines(Path(path).read_text(encoding="utf-8").splitlines()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if os.environ.get("LAVQ_SEED"):
        cfg = cfg.with_overrides({"seed": os.environ["LAVQ_SEED"]})
    return cfg.validate()


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
