"""Training configuration and the ``key=value`` config-file format.

Config files are UTF-8, one ``key=value`` per line; blank lines and lines
starting with ``#`` are ignored.  Recognised keys:

========================  =============================================
strategy.encoder          full_ft | frozen | lora | dora
strategy.decoder          full_ft | frozen | lora | dora
rank, scale               adapter rank and delta multiplier
magnitude_trainable       true/false, DoRA magnitude vector
adapt_vocab_projection    true/false, also wrap the vocabulary projection
lr                        learning rate (default chosen from the strategy)
epochs, batch, seed       training budget and seed
weight_decay, beta1,      AdamW hyperparameters
beta2, eps
checkpoint_every          save a checkpoint every N epochs (0 = never)
vocab                     path to a vocab.json
model.<field>             any ModelConfig field, e.g. model.embed_dim
========================  =============================================
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .model import ADAPTER_KINDS, STRATEGIES, ModelConfig
from .optim import AdamWConfig

PEFT_LR = 5e-5
FULL_FT_LR = 1e-5


def default_lr(encoder: str, decoder: str) -> float:
    return PEFT_LR if encoder in ADAPTER_KINDS or decoder in ADAPTER_KINDS else FULL_FT_LR


@dataclass(frozen=True)
class TrainConfig:
    encoder: str = "dora"
    decoder: str = "lora"
    epochs: int = 20
    batch: int = 16
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    rank: int | None = None
    scale: float = 1.0
    magnitude_trainable: bool = False
    adapt_vocab_projection: bool = False
    checkpoint_every: int = 0
    vocab: str | None = None
    model_overrides: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for name in ("encoder", "decoder"):
            if getattr(self, name) not in STRATEGIES:
                raise ConfigurationError(f"strategy.{name} must be one of {STRATEGIES}")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigurationError("epochs must be >= 0 and batch >= 1")
        if (self.encoder in ADAPTER_KINDS or self.decoder in ADAPTER_KINDS) and self.rank is None:
            raise ConfigurationError("rank is required when a lora/dora strategy is used")
        if self.lr is not None and self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else default_lr(self.encoder, self.decoder)

    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)

    def with_strategy(self, encoder: str, decoder: str) -> "TrainConfig":
        return replace(self, encoder=encoder, decoder=decoder)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}
_SCALARS = {
    "rank": int, "scale": float, "lr": float, "epochs": int, "batch": int, "seed": int,
    "weight_decay": float, "beta1": float, "beta2": float, "eps": float, "checkpoint_every": int,
    "vocab": str,
}
_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}


def parse_config_text(text: str) -> dict:
    """Parse key=value text into TrainConfig keyword arguments."""
    out: dict = {}
    model: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in ("strategy.encoder", "strategy.decoder"):
                out[key.split(".")[1]] = value
            elif key in ("magnitude_trainable", "adapt_vocab_projection"):
                if value.lower() not in _BOOL:
                    raise ValueError(value)
                out[key] = _BOOL[value.lower()]
            elif key in _SCALARS:
                out[key] = _SCALARS[key](value)
            elif key.startswith("model."):
                name = key[len("model."):]
                if name not in _MODEL_FIELDS:
                    raise ConfigurationError(f"line {lineno}: unknown model field {name!r}")
                model[name] = value if name == "activation" else int(value)
            else:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"line {lineno}: bad value {value!r} for {key}") from exc
    if model:
        out["model_overrides"] = model
    return out


def load_config(path: str | Path, **overrides) -> TrainConfig:
    kwargs = parse_config_text(Path(path).read_text(encoding="utf-8"))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)
