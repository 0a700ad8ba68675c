"""Flat ``key=value`` run configuration shared by the CLI, trainer and estimator."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import SubLabel
from .data import DataConfigError, SyntheticConfig
from .losses import ConsistencyConfig
from .model import ModelConfig, SelfRefineConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


_SUBVIDEO_NAMES = {"left": SubLabel.LEFT, "seg": SubLabel.SEG, "right": SubLabel.RIGHT}


@dataclass
class RunConfig:
    # synthetic data
    T: int = 48
    D: int = 32
    vocab_size: int = 64
    n_max: int = 8
    n_prototypes: int = 8
    n_background: int = 4
    seg_frac_min: float = 0.15
    seg_frac_max: float = 0.5
    noise_scale: float = 0.2
    signal_scale: float = 1.0
    seed: int = 0
    # model
    H: int = 16
    sigma_refine: float = 5.0
    refine_iterations: int = 3
    row_normalize: bool = True
    # augmentation
    alpha: float = 0.8
    literal_ratio_range: bool = False
    spatial_noise_scale: float = 0.05
    spatial_channel_drop: float = 0.0
    augment: bool = True
    fresh_augmentation: bool = True
    # losses
    lam: float = 5.0
    sigma_prior: float = 5.0
    downweight: float = 0.5
    prior: str = "gaussian"
    cons_aug_to_orig: bool = True
    cons_orig_to_aug: bool = True
    cons_subvideos: str = "left,seg,right"
    tsg_aug: bool = True
    tsg_orig: bool = True
    label_smoothing: bool = False
    grounding_loss: str = "categorical"
    # training
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    dtype: str = "float32"
    eval_every: int = 1

    # file key -> attribute
    ALIASES = {"lambda": "lam"}

    def validate(self):
        checks = [
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("alpha", 0 < self.alpha < 1, "must lie in (0, 1)"),
            ("H", self.H >= 1, "must be >= 1"),
            ("sigma_refine", self.sigma_refine > 0, "must be > 0"),
            ("refine_iterations", self.refine_iterations >= 0, "must be >= 0"),
            ("sigma_prior", self.sigma_prior > 0, "must be > 0"),
            ("downweight", 0 < self.downweight <= 1, "must lie in (0, 1]"),
            ("prior", self.prior in ("gaussian", "onehot"), "must be gaussian or onehot"),
            ("spatial_noise_scale", self.spatial_noise_scale >= 0, "must be >= 0"),
            ("spatial_channel_drop", 0 <= self.spatial_channel_drop < 1, "must lie in [0, 1)"),
            ("grounding_loss", self.grounding_loss in ("categorical", "binary"), "must be categorical or binary"),
            ("dtype", self.dtype in ("float32", "float64"), "must be float32 or float64"),
            ("eval_every", self.eval_every >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        self.subvideos()
        try:
            self.synthetic().validate()
        except DataConfigError as exc:
            raise ConfigError(exc.key, exc.message) from None
        return self

    def subvideos(self):
        names = [s.strip() for s in self.cons_subvideos.split(",") if s.strip()]
        bad = [n for n in names if n not in _SUBVIDEO_NAMES]
        if bad or not names:
            raise ConfigError("cons_subvideos", f"expected comma list of left/seg/right, got {self.cons_subvideos!r}")
        return tuple(_SUBVIDEO_NAMES[n] for n in names)

    def synthetic(self):
        names = [f.name for f in fields(SyntheticConfig)]
        return SyntheticConfig(**{n: getattr(self, n) for n in names})

    def model(self):
        refine = SelfRefineConfig(self.sigma_refine, self.refine_iterations, self.row_normalize)
        return ModelConfig(D=self.D, H=self.H, vocab_size=self.vocab_size, refine=refine)

    def consistency(self):
        return ConsistencyConfig(self.sigma_prior, self.downweight, self.cons_aug_to_orig,
                                 self.cons_orig_to_aug, self.prior, self.subvideos())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        inverse = {v: k for k, v in self.ALIASES.items()}
        return "".join(f"{inverse.get(f.name, f.name)}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self):
        return int.from_bytes(hashlib.sha256(self.to_text().encode()).digest()[:8], "little")

    @classmethod
    def from_pairs(cls, pairs, base=None):
        cfg = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, raw in pairs:
            name = cls.ALIASES.get(key, key)
            if name not in types:
                raise ConfigError(key, "unknown key")
            changes[name] = _parse(key, raw, getattr(cfg, name))
        return dataclasses.replace(cfg, **changes)

    @classmethod
    def load(cls, path=None, overrides=()):
        pairs = []
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(line, f"line {lineno}: expected key=value")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v.strip()))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must be key=value")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        return cls.from_pairs(pairs).validate()


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key, raw, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None
