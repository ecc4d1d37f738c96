"""Model/run configuration with desk-scale and full-scale (`--preset paper`) presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

MODEL_KINDS = ("rjvae", "rjgan", "rjgan-chain", "rmocogan", "baseline-image")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "rjgan"
    d_z: int = 32
    d_c: int = 24
    d_m: int = 8
    sigma_mu: float = 1.0
    sigma_eps: float = 1.0
    frame_size: int = 32
    T: int = 8
    clip_len: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-5
    batch_size: int = 16
    iterations: int = 300
    seed: int = 0
    summary_term_period: int = 1
    eq1_deduplicate: bool = False
    # architecture widths (desk defaults)
    width: int = 8
    disc_width: int = 16
    rnn_hidden: int = 128
    phi_dim: int = 512
    nn_delta_hidden: int = 32
    elbo_samples: int = 1

    def validate(self) -> "ModelConfig":
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("d_z", "d_c", "d_m", "T", "clip_len", "batch_size", "width", "disc_width",
                     "rnn_hidden", "phi_dim", "nn_delta_hidden", "elbo_samples", "summary_term_period"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.clip_len > self.T:
            raise ConfigError(f"clip_len {self.clip_len} exceeds T {self.T}")
        if self.sigma_mu <= 0 or self.sigma_eps <= 0:
            raise ConfigError("sigma_mu and sigma_eps must be positive")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid optimizer settings")
        fs = self.frame_size
        if fs < 8 or fs & (fs - 1):
            raise ConfigError("frame_size must be a power of two >= 8")
        if self.kind in ("rjgan", "rjgan-chain", "rmocogan"):
            # the video discriminator's 3-frame kernels consume 2 frames per layer
            layers = min(3, fs.bit_length() - 3)
            if self.clip_len <= 2 * layers:
                raise ConfigError(f"clip_len must be > {2 * layers} for frame_size {fs}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def override(self, **kw) -> "ModelConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def desk_preset(kind: str = "rjgan") -> ModelConfig:
    if kind == "rjvae":
        return ModelConfig(kind=kind, d_z=64, lr=5e-4, beta1=0.9, beta2=0.999, weight_decay=0.0,
                           batch_size=16, iterations=500).validate()
    return ModelConfig(kind=kind).validate()


def paper_preset(kind: str = "rjgan") -> ModelConfig:
    """Hyperparameters as published for full-scale training."""
    if kind == "rjvae":
        return ModelConfig(kind=kind, d_z=64, frame_size=64, lr=5e-4, beta1=0.9, beta2=0.999,
                           weight_decay=0.0, batch_size=128, iterations=100_000, width=64,
                           disc_width=64, rnn_hidden=256).validate()
    return ModelConfig(kind=kind, d_z=60, d_c=50, d_m=10, frame_size=64, lr=2e-4, beta1=0.5,
                       beta2=0.999, weight_decay=1e-5, batch_size=32, iterations=100_000, width=64,
                       disc_width=64, nn_delta_hidden=50).validate()


def preset(name: str, kind: str) -> ModelConfig:
    if name == "desk":
        return desk_preset(kind)
    if name == "paper":
        return paper_preset(kind)
    raise ConfigError(f"unknown preset {name!r}")
