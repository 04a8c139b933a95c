"""Run configuration dataclasses and the ``key = value`` config file format.

Keys are dotted (``decoder.window = 7``); ``#`` starts a comment; unknown
keys are rejected. Tuples are written comma-separated (``4,7``).
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, field, fields, is_dataclass

UPSAMPLE_METHODS = ("fold_overlap", "fold", "bilinear", "pixel_shuffle")
INTERACTION_MODES = ("high_to_low", "low_to_high", "bidirectional")
MAB_ATTENTION = ("mixed", "window", "global")
CTX_SOURCES = ("interacted", "raw")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    patch_size: int = 4
    stage_dims: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (2, 2, 2, 2)
    window: int = 7
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError("encoder.patch_size must be >= 1")
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("encoder needs exactly four stages")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if b != 2 * a:
                raise ConfigError(f"encoder.stage_dims must double per stage, got {self.stage_dims}")
        for d in self.stage_depths:
            if d < 2 or d % 2:
                raise ConfigError(f"encoder.stage_depths must be even and >= 2, got {self.stage_depths}")
        if self.window < 1:
            raise ConfigError("encoder.window must be >= 1")


@dataclass
class DecoderConfig:
    r: int = 2
    d_mab: int = 384
    window: tuple = (7, 7)
    mab_attention: str = "mixed"
    interaction_mode: str = "high_to_low"
    across_levels: int = 2
    upsample_method: str = "fold_overlap"
    fold_k: tuple = (3, 3, 7)
    fold_s: tuple = (2, 2, 4)
    fold_p: tuple = (1, 1, 2)
    mab_attention_residual: bool = True
    mab_pre_norm: bool = False
    fold_normalize: bool = False
    ctx_source: str = "interacted"
    mlp_ratio: float = 4.0
    n_heads: int = 0  # 0 -> one head per 64 channels

    def __post_init__(self):
        if isinstance(self.window, int):
            self.window = (self.window, self.window)

    def validate(self) -> None:
        if self.r < 0:
            raise ConfigError("decoder.r must be >= 0")
        if self.d_mab < 1:
            raise ConfigError("decoder.d_mab must be >= 1")
        if len(self.window) != 2 or min(self.window) < 1:
            raise ConfigError(f"decoder.window extents must be >= 1, got {self.window}")
        for name, allowed in (
            ("mab_attention", MAB_ATTENTION),
            ("interaction_mode", INTERACTION_MODES),
            ("upsample_method", UPSAMPLE_METHODS),
            ("ctx_source", CTX_SOURCES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"decoder.{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.across_levels not in (1, 2, 3):
            raise ConfigError("decoder.across_levels must be 1, 2 or 3")
        if not (len(self.fold_k) == len(self.fold_s) == len(self.fold_p) == 3):
            raise ConfigError("decoder fold parameter lists must each have 3 entries")
        for k, s, p in zip(self.fold_k, self.fold_s, self.fold_p):
            if s < 1 or s > k or p < 0:
                raise ConfigError(f"decoder fold step (k={k}, s={s}, p={p}) needs 1 <= s <= k, p >= 0")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 120
    batch: int = 8
    lr_drop_epoch: int = -1  # -1 -> last sixth of training (100 of 120)
    lr_drop_value: float = 2e-5
    image_size: int = 224
    synthetic: int = 0
    val_fraction: float = 0.2
    crop_fraction: float = 0.9
    rotate: bool = True
    dtype: str = "float32"
    data_dir: str = ""

    def drop_epoch(self) -> int:
        if self.lr_drop_epoch >= 0:
            return self.lr_drop_epoch
        return round(self.epochs * 100 / 120)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        if self.optim.lr < 0:
            raise ConfigError("optim.lr must be >= 0")
        if self.train.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.train.drop_epoch() > max(self.train.epochs, 0) and self.train.lr_drop_epoch >= 0:
            raise ConfigError("train.lr_drop_epoch must be <= train.epochs")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if not 0.0 < self.train.crop_fraction <= 1.0:
            raise ConfigError("train.crop_fraction must be in (0, 1]")


def toy_config(**overrides) -> RunConfig:
    """Desk-scale configuration used by the convergence run."""
    cfg = RunConfig(
        encoder=EncoderConfig(stage_dims=(16, 32, 64, 128), stage_depths=(2, 2, 2, 2), window=4),
        decoder=DecoderConfig(r=2, d_mab=64, window=(4, 4)),
        train=TrainConfig(epochs=30, batch=8, image_size=64, synthetic=64),
    )
    for key, val in overrides.items():
        set_key(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# text format


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ is tuple or origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def set_key(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    if not is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    typ = typing.get_type_hints(type(obj))[name]
    if is_dataclass(typ):
        raise ConfigError(f"config key {key!r} names a section, not a value")
    if isinstance(value, str):
        value = _coerce(value, typ, key)
    elif typ is tuple and isinstance(value, int):
        value = (value, value)
    elif typ is tuple:
        value = tuple(value)
    if isinstance(obj, DecoderConfig) and name == "window" and len(value) == 1:
        value = value * 2
    setattr(obj, name, value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, val)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def flatten(cfg, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = _fmt(v)
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(flatten(cfg).items()))


def config_hash(cfg: RunConfig, exclude: tuple = ("train.data_dir",)) -> str:
    text = "".join(f"{k}={v}\n" for k, v in sorted(flatten(cfg).items()) if k not in exclude)
    return hashlib.sha256(text.encode()).hexdigest()[:12]
