"""Flat ``section.key = value`` run configuration with overrides and echo.

Example::

    # toy synthetic run
    backbone.image_size = 64, 64
    fusion.hmt_stage_counts = 1, 1, 1, 1
    train.epochs = 30
    data.source = synthetic

Values are integers, floats, booleans (``true``/``false``), comma-separated
lists, or bare strings. Unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig, ConfigError
from .data import DEFAULT_TABLE, SyntheticSpec
from .fusion import HmtStackConfig
from .model import FeatureSelection, TFormerConfig
from .training import TrainConfig

SEED_ENV = "TFK_SEED"
PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a manifest CSV path
    num_cases: int = 2000
    noise: float = 0.0
    priors: tuple[float, float, float] = (0.25, 0.25, 0.4)
    table: tuple[int, ...] = DEFAULT_TABLE
    split_fractions: tuple[float, float, float] = (0.5, 0.15, 0.35)
    texture_contrast: float = SyntheticSpec.texture_contrast
    seed: int = 0

    def synthetic_spec(self, image_size) -> SyntheticSpec:
        return SyntheticSpec(
            num_cases=self.num_cases, image_size=tuple(image_size), priors=tuple(self.priors),
            table=tuple(self.table), noise=self.noise, split_fractions=tuple(self.split_fractions),
            texture_contrast=self.texture_contrast, seed=self.seed,
        )


@dataclass(frozen=True)
class RunConfig:
    model: TFormerConfig = field(default_factory=TFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    precision: str = "float32"

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.precision not in PRECISIONS:
            raise ConfigError(f"run.precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.data.source == "synthetic":
            self.data.synthetic_spec(self.model.backbone.image_size).validate()

    def to_flat(self) -> dict[str, object]:
        m, b, h = self.model, self.model.backbone, self.model.hmt
        flat = {
            "backbone.image_size": b.image_size,
            "backbone.patch_size": b.patch_size,
            "backbone.base_channels": b.base_channels,
            "backbone.stage_depths": b.stage_depths,
            "backbone.stage_heads": b.stage_heads,
            "backbone.window": b.window,
            "backbone.shared_weights": b.shared_weights,
            "backbone.mlp_ratio": b.mlp_ratio,
            "fusion.hmt_stage_counts": h.stage_counts,
            "fusion.hmt_bridge": h.bridge,
            "fusion.hmt_shift": h.shift,
            "fusion.hmt_mode": h.mode,
            "fusion.head_dim": m.head_dim,
            "fusion.mtp_heads": m.mtp_heads,
            "model.use_cli": m.selection.use_cli,
            "model.use_der": m.selection.use_der,
            "model.use_meta": m.selection.use_meta,
            "model.modalities": tuple(n for n, on in (("der", m.use_derm), ("cli", m.use_cli), ("meta", m.use_meta)) if on),
            "model.fusion": m.fusion,
        }
        for f in fields(TrainConfig):
            flat[f"train.{f.name}"] = getattr(self.train, f.name)
        for f in fields(DataConfig):
            flat[f"data.{f.name}"] = getattr(self.data, f.name)
        flat["run.seed"] = self.seed
        flat["run.precision"] = self.precision
        return flat


DEFAULT_FLAT = RunConfig().to_flat()


def parse_value(text: str, like):
    """Parse ``text`` into the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, tuple):
        items = [t for t in text.replace("[", "").replace("]", "").replace("(", "").replace(")", "").split(",")]
        items = [t.strip() for t in items if t.strip()]
        proto = like[0] if like else ""
        return tuple(parse_value(t, proto) for t in items)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value, f"{origin}:{n}")
    return values


def _coerce(key: str, value: str, where: str):
    if key not in DEFAULT_FLAT:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return parse_value(value, DEFAULT_FLAT[key])
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def from_flat(flat: dict[str, object]) -> RunConfig:
    """Build and validate a :class:`RunConfig`; missing keys take defaults."""
    v = dict(DEFAULT_FLAT)
    v.update(flat)
    try:
        backbone = BackboneConfig(
            image_size=v["backbone.image_size"], patch_size=v["backbone.patch_size"],
            base_channels=v["backbone.base_channels"], stage_depths=v["backbone.stage_depths"],
            stage_heads=v["backbone.stage_heads"], window=v["backbone.window"],
            shared_weights=v["backbone.shared_weights"], mlp_ratio=v["backbone.mlp_ratio"],
        )
        hmt = HmtStackConfig(stage_counts=v["fusion.hmt_stage_counts"], bridge=v["fusion.hmt_bridge"],
                             shift=v["fusion.hmt_shift"], mode=v["fusion.hmt_mode"], mlp_ratio=backbone.mlp_ratio)
        mods = set(v["model.modalities"])
        unknown = mods - {"der", "cli", "meta"}
        if unknown:
            raise ConfigError(f"model.modalities: unknown {sorted(unknown)}")
        model = TFormerConfig(
            backbone=backbone, hmt=hmt, head_dim=v["fusion.head_dim"], mtp_heads=v["fusion.mtp_heads"],
            selection=FeatureSelection(v["model.use_cli"], v["model.use_der"], v["model.use_meta"]),
            use_derm="der" in mods, use_cli="cli" in mods, use_meta="meta" in mods, fusion=v["model.fusion"],
        )
        train = TrainConfig(**{f.name: v[f"train.{f.name}"] for f in fields(TrainConfig)})
        data = DataConfig(**{f.name: v[f"data.{f.name}"] for f in fields(DataConfig)})
        cfg = RunConfig(model, train, data, int(v["run.seed"]), v["run.precision"])
        cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, overrides: list[str] | None = None, env=None) -> RunConfig:
    """Read a config file, apply ``section.key=value`` overrides and ``TFK_SEED``."""
    flat: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        flat.update(parse_text(p.read_text(), str(p)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        flat[key] = _coerce(key, value, "--set")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            flat["run.seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return from_flat(flat)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.to_flat().items())


def echo(cfg: RunConfig, out_dir) -> Path:
    """Write the resolved config to ``<out_dir>/config.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text(dump(cfg))
    return path


def with_overrides(cfg: RunConfig, **flat) -> RunConfig:
    """Copy of ``cfg`` with dotted keys (``train__epochs=3``) replaced."""
    f = cfg.to_flat()
    for k, v in flat.items():
        f[k.replace("__", ".")] = v
    return from_flat(f)


__all__ = [
    "DataConfig", "RunConfig", "SEED_ENV", "dump", "echo", "from_flat", "load_config",
    "parse_text", "with_overrides",
]
