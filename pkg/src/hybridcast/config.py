"""Run configuration: one flat record, loadable from JSON or TOML."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

VARIANTS = ("full", "no_lde", "no_lwe", "no_stae", "no_stfe", "re_mlp", "no_dva")
EMBED_INITS = ("prior", "zero", "uniform", "normal", "xavier", "he")


@dataclass
class RunConfig:
    # data: either files or a synthetic spec such as {"n": 6, "days": 28}
    data_path: str | None = None
    edges_path: str | None = None
    meta_path: str | None = None
    fill_nan: bool = False
    synthetic: dict | None = None
    # model
    t_in: int = 12
    t_out: int = 12
    dim: int = 32
    hidden: int = 64
    alpha: float = 1.0
    f_low: int = 1
    variant: str = "full"
    embed_init: str = "prior"
    weekly_prior: str = "residual"
    float64: bool = False
    # training
    lr: float = 2e-3
    lr_decay_every: int = 0
    lr_decay_gamma: float = 0.5
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    grad_clip: float | None = None
    seed: int = 0
    # evaluation
    mape_floor: float = 1.0
    out_dir: str = "runs"
    extra: dict = field(default_factory=dict)

    def validate(self, require_data: bool = True) -> "RunConfig":
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}", "alpha")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1", "t_in" if self.t_in < 1 else "t_out")
        bins = self.t_out // 2 + 1
        if not 1 <= self.f_low < bins:
            raise ConfigError(f"f_low must lie in [1, {bins}), got {self.f_low}", "f_low")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.dim < 1 or self.hidden < 1:
            raise ConfigError("dim and hidden must be >= 1", "dim" if self.dim < 1 else "hidden")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", "lr")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0", "max_epochs")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1", "patience")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}", "variant")
        if self.embed_init not in EMBED_INITS:
            raise ConfigError(f"embed_init must be one of {EMBED_INITS}", "embed_init")
        if self.weekly_prior not in ("residual", "raw"):
            raise ConfigError("weekly_prior must be 'residual' or 'raw'", "weekly_prior")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0", "grad_clip")
        if self.mape_floor < 0:
            raise ConfigError("mape_floor must be >= 0", "mape_floor")
        if require_data and self.synthetic is None and self.data_path is None:
            raise ConfigError("either data_path or synthetic must be set", "data_path")
        if self.synthetic is not None:
            unknown = set(self.synthetic) - {"n", "days", "steps_per_day", "noise_std", "seed"}
            if unknown:
                raise ConfigError(f"unknown synthetic keys {sorted(unknown)}", "synthetic")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}", sorted(unknown)[0])
        return cls(**raw)


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", "config") from None
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", "config") from None


def parse_synthetic(spec: str) -> dict:
    """``"n=3 days=28 seed=7"`` (spaces or commas) -> dict."""
    out: dict = {}
    for token in spec.replace(",", " ").split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ConfigError(f"synthetic spec token {token!r} is not key=value", "synthetic")
        try:
            out[key] = float(value) if key == "noise_std" else int(value)
        except ValueError:
            raise ConfigError(f"synthetic.{key}: cannot parse {value!r}", f"synthetic.{key}") from None
    return out
