"""Full model assembly, multi-label classification layer and training loss."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone, BackboneConfig, ConfigError
from .core import functional as F
from .core.gradcheck import ContractError
from .core.nn import Linear, Module
from .core.rng import Rng
from .core.tensor import Tensor, as_tensor
from .fusion import FusionError, Head, HmtStack, HmtStackConfig, MetaMLP, MtpBlock
from .schema import DERM7PT, DERM7PT_META, LabelSchema, MetaSchema, SchemaError

FEATURE_ORDER = ("cli", "der", "meta")
FUSIONS = ("tformer", "concat")


class LabelError(SchemaError):
    """Raised when a ground-truth class index is outside its label's range."""


@dataclass(frozen=True)
class FeatureSelection:
    use_cli: bool = False
    use_der: bool = True
    use_meta: bool = True

    def __post_init__(self):
        if not (self.use_cli or self.use_der or self.use_meta):
            raise ConfigError("feature selection needs at least one of cli, der, meta")

    @property
    def names(self) -> tuple[str, ...]:
        flags = {"cli": self.use_cli, "der": self.use_der, "meta": self.use_meta}
        return tuple(n for n in FEATURE_ORDER if flags[n])


@dataclass(frozen=True)
class TFormerConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hmt: HmtStackConfig = field(default_factory=HmtStackConfig)
    head_dim: int = 128
    mtp_heads: int = 4
    selection: FeatureSelection = field(default_factory=FeatureSelection)
    use_derm: bool = True
    use_cli: bool = True
    use_meta: bool = True
    fusion: str = "tformer"
    schema: LabelSchema = DERM7PT
    meta_schema: MetaSchema = DERM7PT_META

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.head_dim < 1 or self.mtp_heads < 1 or self.head_dim % self.mtp_heads:
            raise ConfigError(f"head_dim {self.head_dim} must be a positive multiple of mtp_heads {self.mtp_heads}")
        missing = set(self.selection.names) - set(self.available_features)
        if missing:
            raise ConfigError(f"selected features {sorted(missing)} need a disabled modality")

    @property
    def available_features(self) -> tuple[str, ...]:
        on = {"cli": self.use_cli, "der": self.use_derm, "meta": self.use_meta}
        return tuple(n for n in FEATURE_ORDER if on[n])

    @property
    def meta_dim(self) -> int:
        return self.meta_schema.length

    def single_modality(self, name: str) -> "TFormerConfig":
        """Same config restricted to one modality (``der``, ``cli`` or ``meta``)."""
        if name not in FEATURE_ORDER:
            raise ConfigError(f"unknown modality {name!r}")
        sel = FeatureSelection(use_cli=name == "cli", use_der=name == "der", use_meta=name == "meta")
        return replace(self, use_derm=name == "der", use_cli=name == "cli", use_meta=name == "meta", selection=sel)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "hmt_stage_counts": list(self.hmt.stage_counts),
            "hmt_bridge": self.hmt.bridge,
            "hmt_shift": self.hmt.shift,
            "hmt_mode": self.hmt.mode,
            "head_dim": self.head_dim,
            "mtp_heads": self.mtp_heads,
            "selection": list(self.selection.names),
            "modalities": list(self.available_features),
            "fusion": self.fusion,
            "labels": list(self.schema.names),
            "class_counts": list(self.schema.class_counts),
            "meta_dim": self.meta_dim,
        }


@dataclass
class FusedFeatures:
    f_cli: Tensor | None = None
    f_der: Tensor | None = None
    f_meta0: Tensor | None = None
    f_meta_ca: Tensor | None = None
    f_meta: Tensor | None = None

    def get(self, name: str) -> Tensor:
        return {"cli": self.f_cli, "der": self.f_der, "meta": self.f_meta}[name]


@dataclass
class Prediction:
    """Per-label logits (kept for the loss), probabilities and argmax classes."""

    logits: list[Tensor]

    @property
    def probs(self) -> list[np.ndarray]:
        out = []
        for lg in self.logits:
            z = lg.data - lg.data.max(axis=-1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=-1, keepdims=True))
        return out

    @property
    def classes(self) -> np.ndarray:
        """``[B, num_labels]`` argmax class indices."""
        return np.stack([lg.data.argmax(axis=-1) for lg in self.logits], axis=-1)


class ClassificationLayer(Module):
    """Shared ``k*D -> D`` trunk with GELU, then one linear head per label."""

    def __init__(self, in_dim: int, schema: LabelSchema = DERM7PT, hidden: int = 128):
        self.schema = schema
        self.in_dim = in_dim
        self.trunk = Linear(in_dim, hidden)
        self.heads = [Linear(hidden, k) for k in schema.class_counts]

    def forward(self, x: Tensor) -> Prediction:
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"classification input width {x.shape[-1]} != {self.in_dim}")
        z = F.gelu(self.trunk(x))
        return Prediction([h(z) for h in self.heads])


def classification_layer(concat: Tensor, layer: ClassificationLayer) -> Prediction:
    return layer(concat)


def multi_label_loss(pred: Prediction, truth, schema: LabelSchema = DERM7PT) -> Tensor:
    """Mean over labels of the batch-mean categorical cross-entropy."""
    truth = np.asarray(truth)
    if truth.ndim == 1:
        truth = truth[None]
    if len(pred.logits) != schema.num_labels or truth.shape[-1] != schema.num_labels:
        raise ContractError(f"expected {schema.num_labels} labels, got {len(pred.logits)} heads "
                            f"and truth of shape {truth.shape}")
    total = None
    for i, (name, k) in enumerate(zip(schema.names, schema.class_counts)):
        col = truth[:, i]
        if (col < 0).any() or (col >= k).any():
            bad = int(col[(col < 0) | (col >= k)][0])
            raise LabelError(f"label {name}: class index {bad} outside [0, {k})")
        logits = pred.logits[i]
        if logits.ndim == 1:
            logits = logits.reshape(1, -1)
        ce = F.mean(F.cross_entropy(logits, col))
        total = ce if total is None else total + ce
    return total * (1.0 / schema.num_labels)


class TFormer(Module):
    """Two image backbones, HMT fusion, pooling heads, meta MLP, MTP and classifier.

    Modalities can be switched off for single-modality baselines; with
    ``fusion="concat"`` the HMT and MTP stages are skipped and the
    selected head features are concatenated directly.
    """

    def __init__(self, config: TFormerConfig):
        self.config = config
        cfg, d = config.backbone, config.head_dim
        last = cfg.stage_channels(3)
        self.backbone_der = Backbone(cfg) if config.use_derm else None
        if config.use_cli:
            self.backbone_cli = self.backbone_der if (cfg.shared_weights and config.use_derm) else Backbone(cfg)
        else:
            self.backbone_cli = None
        self.hmt = (HmtStack(cfg, config.hmt)
                    if config.use_derm and config.use_cli and config.fusion == "tformer" else None)
        self.head_der = Head(last, d) if config.use_derm else None
        self.head_cli = Head(last, d) if config.use_cli else None
        self.meta_mlp = MetaMLP(config.meta_dim, d) if config.use_meta else None
        self.mtp = (MtpBlock(d, config.mtp_heads)
                    if config.use_meta and (config.use_derm or config.use_cli) and config.fusion == "tformer"
                    else None)
        self.classifier = ClassificationLayer(len(config.selection.names) * d, config.schema, d)

    def branch_parameter_names(self, branch: str) -> list[str]:
        """Parameter names of one image backbone, relative to the backbone."""
        bb = {"der": self.backbone_der, "cli": self.backbone_cli}[branch]
        return [n for n, _ in bb.named_parameters()] if bb is not None else []

    def features(self, derm: Tensor | None, cli: Tensor | None, meta: Tensor | None) -> FusedFeatures:
        cfg = self.config
        out = FusedFeatures()
        der_feats = self.backbone_der(derm) if cfg.use_derm else None
        cli_feats = self.backbone_cli(cli) if cfg.use_cli else None
        if self.hmt is not None:
            der_last, cli_last = self.hmt(
                der_feats, cli_feats,
                [self.backbone_der.merge(i) for i in range(4)],
                [self.backbone_cli.merge(i) for i in range(4)],
            )
        else:
            der_last = der_feats[-1] if der_feats else None
            cli_last = cli_feats[-1] if cli_feats else None
        if der_last is not None:
            out.f_der = self.head_der(der_last)
        if cli_last is not None:
            out.f_cli = self.head_cli(cli_last)
        if cfg.use_meta:
            if meta.shape[-1] != cfg.meta_dim:
                raise FusionError(f"meta vector length {meta.shape[-1]} != schema length {cfg.meta_dim}")
            out.f_meta0 = self.meta_mlp(meta)
            if self.mtp is not None:
                images = [f for f in (out.f_cli, out.f_der) if f is not None]
                out.f_meta, out.f_meta_ca = self.mtp(out.f_meta0, images)
            else:
                out.f_meta = out.f_meta0
        return out

    def forward(self, derm, cli, meta) -> tuple[Prediction, FusedFeatures]:
        derm, cli, meta = _batched(derm, 4), _batched(cli, 4), _batched(meta, 2)
        feats = self.features(derm, cli, meta)
        parts = [feats.get(n) for n in self.config.selection.names]
        x = parts[0] if len(parts) == 1 else F.concat(parts, axis=-1)
        return self.classifier(x), feats


def _batched(x, ndim: int) -> Tensor | None:
    if x is None:
        return None
    t = as_tensor(x)
    return t.reshape(1, *t.shape) if t.ndim == ndim - 1 else t


def build_model(config: TFormerConfig, rng: Rng | int = 0) -> TFormer:
    """Construct and initialise a model; parameters are keyed by name."""
    rng = Rng(rng) if isinstance(rng, int) else rng
    return TFormer(config).initialise(rng.split("init"))


def tformer_forward(derm_image, cli_image, meta_onehot, model: TFormer) -> tuple[Prediction, FusedFeatures]:
    return model(derm_image, cli_image, meta_onehot)


def count_parameters(model: Module) -> dict[str, int]:
    """Element counts grouped by top-level name prefix, plus ``total``.

    Shared parameters are counted once, under the first name reaching them.
    """
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".", 1)[0]
        counts[key] = counts.get(key, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts


def hmt_block_count(model: TFormer) -> int:
    return sum(len(s.blocks) for s in model.hmt.stages) if model.hmt is not None else 0


__all__ = [
    "ClassificationLayer", "FeatureSelection", "FusedFeatures", "LabelError", "Prediction",
    "TFormer", "TFormerConfig", "build_model", "classification_layer",
    "count_parameters", "hmt_block_count", "multi_label_loss", "tformer_forward",
]
