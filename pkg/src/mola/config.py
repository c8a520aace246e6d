"""Run configuration: typed dataclasses, strict TOML loading, canonical hash.

Every knob has a default, so an empty config file is a valid run. Loading is
strict — an unknown section or key is a ConfigError naming the offender, and
values must match the field's type (ints are accepted where floats are
expected). The resolved config is archived as canonical JSON next to each
run's outputs; its sha256 is the config hash recorded in run manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .synthworld import WorldConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODALITIES = ("semantic", "depth", "flow")
DESIGNS = ("moidm", "baseline", "direct", "single_rgb", "single_multiloss")
HEADS = ("flow_match", "autoregressive")


@dataclass(frozen=True)
class DataConfig:
    episodes: int = 500
    seed: int = 0


@dataclass(frozen=True)
class VideoConfig:
    """Stage-I world model: frame autoencoder + latent denoiser."""

    latent_channels: int = 4
    autoencoder_channels: int = 32
    dim: int = 128
    depth: int = 4
    heads: int = 4
    latent_patch: int = 2
    horizon: int = 8
    autoencoder_steps: int = 3000
    denoiser_steps: int = 20000
    batch: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.0
    sample_steps: int = 1  # denoising steps used when imagining futures


@dataclass(frozen=True)
class IdmConfig:
    """Stage-II inverse dynamics models and their codebooks."""

    dim: int = 128
    encoder_depth: int = 4
    transition_depth: int = 4
    decoder_depth: int = 2
    feature_depth: int = 2
    heads: int = 4
    patch: int = 4
    queries: int = 8
    codes: int = 128
    code_dim: int = 32
    beta: float = 0.25
    lambda_semantic: float = 0.5
    lambda_depth: float = 1.0
    # Flow rasters are ~98% zero pixels, so their plain MSE is tiny next to
    # the rgb term; flow is also the only target the codes alone must explain
    # (its feature input is zeroed). Weight it up so it actually trains.
    lambda_flow: float = 50.0
    step_gap: int = 4
    dead_code_steps: int = 1000
    codebook_update: str = "loss"  # "loss" | "ema"
    ema_decay: float = 0.99
    # quantize on the unit sphere: scale collapse (encoder outputs and codes
    # jointly shrinking until the codebook resolves nothing) is impossible
    spherical_codes: bool = True
    steps: int = 10000
    batch: int = 64
    lr: float = 1e-4
    warmup: int = 500
    weight_decay: float = 1e-4
    trunk_modality: str = "flow"


@dataclass(frozen=True)
class PolicyConfig:
    """Stage-III joint fine-tune: conditioning plus the action head."""

    dim: int = 128
    heads: int = 4
    encoder_depth: int = 4
    decoder_depth: int = 4
    chunk: int = 8
    sample_steps: int = 10
    head: str = "flow_match"  # "flow_match" | "autoregressive"
    ar_bins: int = 64
    steps: int = 10000
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-2
    modalities: tuple = MODALITIES
    design: str = "moidm"
    freeze_moidm: bool = False
    from_scratch: bool = False
    drop_task_token: bool = False
    fraction: float = 1.0
    pooled_dim: int = 16
    baseline_depth: int = 2  # temporal transformer depth for the no-IDM baseline


@dataclass(frozen=True)
class EvalConfig:
    chains: int = 8
    chain_length: int = 5
    budget: int = 60
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    noise_seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs"
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    video: VideoConfig = field(default_factory=VideoConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.world.validate()
        if self.idm.step_gap < 1 or self.idm.step_gap > self.video.horizon:
            raise ConfigError(
                f"idm.step_gap ({self.idm.step_gap}) must lie in [1, video.horizon={self.video.horizon}]"
            )
        if self.video.horizon + 1 >= self.world.episode_len:
            raise ConfigError("video.horizon must be smaller than world.episode_len - 1")
        if self.policy.chunk >= self.world.episode_len:
            raise ConfigError("policy.chunk must be smaller than world.episode_len")
        if self.policy.head not in HEADS:
            raise ConfigError(f"policy.head must be one of {HEADS}, got {self.policy.head!r}")
        if self.policy.design not in DESIGNS:
            raise ConfigError(f"policy.design must be one of {DESIGNS}, got {self.policy.design!r}")
        bad = [m for m in self.policy.modalities if m not in MODALITIES]
        if bad:
            raise ConfigError(f"unknown modalities {bad}; valid: {MODALITIES}")
        if self.policy.design == "moidm" and not self.policy.modalities:
            raise ConfigError("design 'moidm' needs at least one modality (use design 'baseline' for none)")
        if self.idm.codebook_update not in ("loss", "ema"):
            raise ConfigError(f"idm.codebook_update must be 'loss' or 'ema', got {self.idm.codebook_update!r}")
        if self.idm.trunk_modality not in MODALITIES:
            raise ConfigError(f"idm.trunk_modality must be one of {MODALITIES}")
        if self.idm.codes < 2 or self.idm.queries < 1 or self.idm.code_dim < 1:
            raise ConfigError("idm codebook sizes must be positive (codes >= 2)")
        if self.world.resolution % self.idm.patch:
            raise ConfigError("world.resolution must be divisible by idm.patch")
        if self.world.resolution % 4:
            raise ConfigError("world.resolution must be divisible by 4 (autoencoder downsamples twice)")
        if (self.world.resolution // 4) % self.video.latent_patch:
            raise ConfigError("latent grid must be divisible by video.latent_patch")
        if not (0.0 < self.policy.fraction <= 1.0):
            raise ConfigError("policy.fraction must be in (0, 1]")
        if self.policy.sample_steps < 1 or self.video.sample_steps < 1:
            raise ConfigError("sample step counts must be >= 1")
        if self.eval.chain_length < 1 or self.eval.chains < 1 or self.eval.budget < 1:
            raise ConfigError("eval sizes must be >= 1")


_SECTIONS = {
    "world": WorldConfig,
    "data": DataConfig,
    "video": VideoConfig,
    "idm": IdmConfig,
    "policy": PolicyConfig,
    "eval": EvalConfig,
}


def _coerce(section: str, name: str, ftype, value):
    origin = getattr(ftype, "__origin__", None)
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{name} expects a number, got {value!r}")
        return float(value)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{name} expects an integer, got {value!r}")
        return value
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{name} expects a boolean, got {value!r}")
        return value
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{name} expects a string, got {value!r}")
        return value
    if ftype is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{section}.{name} expects a list of strings, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{section}.{name}: unsupported config field type {ftype!r}")


def _build_section(cls, section: str, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {section}.{key}" if section else f"unknown config key {key}")
        ftype = fields[key].type
        if isinstance(ftype, str):  # from __future__ annotations in dataclass defs
            ftype = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(ftype, ftype)
        kwargs[key] = _coerce(section or "<top>", key, ftype, value)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    top: dict = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section [{key}] must be a table")
            top[key] = _build_section(_SECTIONS[key], key, value)
        else:
            rc_fields = {f.name: f for f in dataclasses.fields(RunConfig)}
            if key not in rc_fields or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key}")
            ftype = rc_fields[key].type
            if isinstance(ftype, str):
                ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, ftype)
            top[key] = _coerce("", key, ftype, value)
    cfg = RunConfig(**top)
    if os.environ.get("MOLA_DETERMINISTIC") == "1" and not cfg.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    """Load a TOML config file; None means all defaults."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config {p} is not valid TOML: {e}") from e
    return config_from_dict(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def archive_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(resolved_dict(cfg), sort_keys=True, indent=2) + "\n")
