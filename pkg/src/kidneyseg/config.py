"""Flat key=value configuration with defaults, presets, and hashing.

Files are UTF-8 text, one `key = value` per line, `#` starts a comment.
Unknown keys are rejected so typos fail loudly. Every run can echo its
fully resolved configuration; the echo text is stable, which makes its
SHA-256 usable as a run fingerprint.

The ablation presets E1..E5 toggle four features on top of a base
configuration. They form a chain: E5 disables everything, each later
preset enables one more feature, and E1 equals the base configuration.
"""

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class PipelineConfig:
    # intensity window and grids
    clip_lo: float = -500.0
    clip_hi: float = 400.0
    spacing_high: float = 1.0
    spacing_low: float = 4.0
    # networks
    high_levels: int = 4
    high_base_filters: int = 32
    high_input_size: int = 108
    low_levels: int = 4
    low_base_filters: int = 16
    low_input_size: int = 108
    use_multires: bool = True
    use_dropout: bool = True
    dropout_rate: float = 0.1
    input_scale: float = 0.002
    # loss
    loss_alpha: float = 0.3
    loss_gamma: float = 0.7
    topk_fraction: float = 0.1
    weight_background: float = 0.05
    weight_parenchyma: float = 0.10
    weight_abnormality: float = 0.99
    # optimization
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2
    max_epochs: int = 1000
    patience: int = 10
    train_stride: int = 10
    grid_jitter: bool = False
    patches_per_epoch: int = 0  # 0 = full grid every epoch
    use_augment: bool = True
    augment_probability: float = 0.7
    seed: int = 17
    workers: int = 1  # thread cap handed to the BLAS backends
    # inference and post-processing
    post_threshold: float = 0.5
    post_iterations: int = 5
    # evaluation
    empty_abnormality: str = "exclude"  # or "zero"
    bootstrap_resamples: int = 10000
    # phantom cohorts
    phantom_count: int = 10
    phantom_size: int = 48
    phantom_spacing: float = 1.0
    phantom_fraction: float = 0.5
    cohort_test_fraction: float = 0.2
    cohort_val_fraction: float = 0.2

    def __post_init__(self):
        if self.clip_lo >= self.clip_hi:
            raise ConfigError(f"clip_lo {self.clip_lo} must be below clip_hi {self.clip_hi}")
        if self.spacing_high <= 0 or self.spacing_low <= 0:
            raise ConfigError("spacings must be positive")
        r = self.spacing_low / self.spacing_high
        if abs(r - round(r)) > 1e-9 or r < 1.0:
            raise ConfigError(f"coarse spacing must be an integer multiple of fine spacing, got ratio {r}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ConfigError(f"topk_fraction must be in (0, 1], got {self.topk_fraction}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ConfigError(f"augment_probability must be in [0, 1], got {self.augment_probability}")
        for name in ("high_levels", "high_base_filters", "high_input_size",
                     "low_levels", "low_base_filters", "low_input_size",
                     "batch_size", "max_epochs", "patience", "train_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss_alpha < 0 or self.loss_gamma < 0:
            raise ConfigError("loss coefficients must be >= 0")
        if self.empty_abnormality not in ("exclude", "zero"):
            raise ConfigError(f"empty_abnormality must be 'exclude' or 'zero', got {self.empty_abnormality!r}")
        if self.patches_per_epoch < 0:
            raise ConfigError("patches_per_epoch must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def ratio(self):
        return int(round(self.spacing_low / self.spacing_high))

    @property
    def class_weights(self):
        return (self.weight_background, self.weight_parenchyma, self.weight_abnormality)

    @property
    def format1_weights(self):
        return (self.weight_background, self.weight_parenchyma)


_DEFAULTS = PipelineConfig()
_FIELDS = {f.name: type(getattr(_DEFAULTS, f.name)) for f in fields(PipelineConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1"):
                return True
            if low in ("false", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind.__name__}") from None


def parse_config(text, base: PipelineConfig = None) -> PipelineConfig:
    """Parse key=value text on top of defaults (or an explicit base)."""
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in updates:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        updates[key] = _coerce(key, raw)
    return replace(base or PipelineConfig(), **updates)


def load_config(path, base: PipelineConfig = None) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def render_config(cfg: PipelineConfig) -> str:
    """Canonical resolved-config text (declaration order, one key per line)."""
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()


def config_diff(a: PipelineConfig, b: PipelineConfig):
    """Names of keys whose values differ."""
    return tuple(
        f.name for f in fields(PipelineConfig)
        if getattr(a, f.name) != getattr(b, f.name)
    )


# -------------------------------------------------------------- presets

PRESET_NAMES = ("E1", "E2", "E3", "E4", "E5")

_PRESET_OVERRIDES = {
    "E1": {},
    "E2": {"use_dropout": False},
    "E3": {"use_dropout": False, "topk_fraction": 1.0},
    "E4": {"use_dropout": False, "topk_fraction": 1.0, "use_augment": False},
    "E5": {"use_dropout": False, "topk_fraction": 1.0, "use_augment": False,
           "use_multires": False},
}


def apply_preset(cfg: PipelineConfig, name) -> PipelineConfig:
    if name not in _PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")
    return replace(cfg, **_PRESET_OVERRIDES[name])


def enabled_features(cfg: PipelineConfig):
    """The feature set a configuration turns on."""
    out = set()
    if cfg.use_multires:
        out.add("multires")
    if cfg.use_augment:
        out.add("augment")
    if cfg.topk_fraction < 1.0:
        out.add("topk")
    if cfg.use_dropout and cfg.dropout_rate > 0.0:
        out.add("dropout")
    return frozenset(out)
