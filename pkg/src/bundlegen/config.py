"""Run configuration: the single source of all hyperparameters.

Defaults follow the reference setting (L=3, d=256, K=50, gamma=1, lambda=0.5);
``desk_scale()`` shrinks width and history for fast CPU experiments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .types import ConfigError

OBJECTIVE_MODES = ("set_contrastive", "set_only", "independent_xent")
DECODER_MODES = ("nar", "ar")
TYPE_GROUPS = ("items", "slogans", "template")
DEFAULT_AR_ORDER = ("items", "slogans", "template")


@dataclass(frozen=True)
class TrainConfig:
    # architecture
    n_layers: int = 3
    d: int = 256
    n_heads: int = 4
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    tie_output: bool = False
    # problem sizes
    K: int = 50
    I: int = 3
    S: int = 2
    n_users: int = 500
    n_items: int = 200
    n_slogans: int = 20
    n_templates: int = 10
    # objective
    gamma: float = 1.0
    lam: float = 0.5
    objective: str = "set_contrastive"
    # decoding
    decoder_mode: str = "nar"
    ar_order: tuple[str, str, str] = DEFAULT_AR_ORDER
    # optimization
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ar_order", tuple(self.ar_order))
        self.validate()

    def validate(self) -> None:
        checks = {
            "n_layers": self.n_layers >= 0,
            "d": self.d > 0 and self.d % self.n_heads == 0,
            "n_heads": self.n_heads > 0,
            "ffn_mult": self.ffn_mult > 0,
            "ln_eps": self.ln_eps > 0,
            "K": self.K > 0,
            "I": self.I > 0,
            "S": self.S > 0,
            "n_users": self.n_users > 0,
            "n_items": self.n_items >= self.I,
            "n_slogans": self.n_slogans >= self.S,
            "n_templates": self.n_templates >= 1,
            "gamma": self.gamma >= 0,
            "lam": self.lam >= 0,
            "learning_rate": self.learning_rate > 0,
            "batch_size": self.batch_size > 0,
            "epochs": self.epochs >= 1,
            "patience": self.patience >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid value for config key {key!r}: {getattr(self, key)!r}")
        if self.objective not in OBJECTIVE_MODES:
            raise ConfigError(f"invalid value for config key 'objective': {self.objective!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"invalid value for config key 'decoder_mode': {self.decoder_mode!r}")
        if sorted(self.ar_order) != sorted(TYPE_GROUPS):
            raise ConfigError(
                f"invalid value for config key 'ar_order': {self.ar_order!r} "
                f"(must be a permutation of {TYPE_GROUPS})"
            )

    @property
    def B(self) -> int:
        return self.I + self.S + 1

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(d=64, K=20)
        base.update(overrides)
        return cls(**base)

    def replace(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ar_order"] = list(self.ar_order)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]
