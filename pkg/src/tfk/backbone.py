"""Four-stage Swin-style feature extractor."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import SwinBlock, TokenGrid, effective_window
from .core.nn import Linear, Module
from .core.tensor import ShapeError, Tensor

NUM_STAGES = 4


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


class MergeError(ShapeError):
    """Raised when patch merging meets odd grid extents."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    base_channels: int = 16
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_heads: tuple[int, ...] = (1, 2, 4, 4)
    window: int = 4
    shared_weights: bool = False
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "stage_depths", tuple(int(v) for v in self.stage_depths))
        object.__setattr__(self, "stage_heads", tuple(int(v) for v in self.stage_heads))
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        step = self.patch_size * 2 ** (NUM_STAGES - 1)
        if self.patch_size < 1 or self.base_channels < 1 or self.window < 1:
            raise ConfigError("patch_size, base_channels and window must be positive")
        if h % step or w % step or h <= 0 or w <= 0:
            raise ConfigError(f"image size {h}x{w} must be divisible by patch_size*8 = {step}")
        if len(self.stage_depths) != NUM_STAGES or len(self.stage_heads) != NUM_STAGES:
            raise ConfigError("stage_depths and stage_heads need exactly 4 entries")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"stage depths must be nonnegative: {self.stage_depths}")
        for i, heads in enumerate(self.stage_heads):
            c = self.stage_channels(i)
            if heads < 1 or c % heads:
                raise ConfigError(f"stage {i + 1}: {c} channels not divisible by {heads} heads")
            rh, rw = self.stage_resolution(i)
            m, _ = effective_window(rh, rw, self.window)
            if rh % m or rw % m:
                raise ConfigError(f"stage {i + 1}: {rh}x{rw} grid not divisible by window {m}")

    def stage_resolution(self, i: int) -> tuple[int, int]:
        """Token grid extents of stage ``i`` (0-based)."""
        h, w = self.image_size
        f = self.patch_size * 2 ** i
        return h // f, w // f

    def stage_channels(self, i: int) -> int:
        return self.base_channels * 2 ** i

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def patchify(images: Tensor, patch: int) -> Tensor:
    """``[B, H, W, 3]`` -> ``[B, H/p, W/p, p*p*3]`` (row, col, channel order)."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // patch, w // patch, patch * patch * c)


class PatchEmbed(Module):
    def __init__(self, patch: int, channels: int, in_chans: int = 3):
        self.patch = patch
        self.proj = Linear(patch * patch * in_chans, channels)

    def forward(self, images: Tensor) -> TokenGrid:
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        return TokenGrid(self.proj(patchify(images, self.patch)))


def merge_gather(x: Tensor) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, H/2, W/2, 4C]``.

    Each 2x2 neighbourhood is concatenated in the order top-left,
    bottom-left, top-right, bottom-right.
    """
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise MergeError(f"patch merging needs even extents, got {h}x{w}")
    # axes after reshape: b, row-block, dy, col-block, dx, c  -> b, rb, cb, dx, dy, c
    y = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5)
    return y.reshape(b, h // 2, w // 2, 4 * c)


class PatchMerging(Module):
    def __init__(self, channels: int):
        self.reduction = Linear(4 * channels, 2 * channels, bias=False)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        return TokenGrid(self.reduction(merge_gather(grid.tokens)))


class Stage(Module):
    def __init__(self, cfg: BackboneConfig, i: int):
        res, c = cfg.stage_resolution(i), cfg.stage_channels(i)
        self.merge = PatchMerging(c // 2) if i > 0 else None
        self.blocks = [
            SwinBlock(c, cfg.stage_heads[i], res, cfg.window, shifted=bool(j % 2), mlp_ratio=cfg.mlp_ratio)
            for j in range(cfg.stage_depths[i])
        ]

    def forward(self, grid: TokenGrid) -> TokenGrid:
        if self.merge is not None:
            grid = self.merge(grid)
        for blk in self.blocks:
            grid = blk(grid)
        return grid


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig):
        self.config = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.base_channels)
        self.stages = [Stage(cfg, i) for i in range(NUM_STAGES)]

    def forward(self, images: Tensor) -> list[TokenGrid]:
        """Post-block token grid of every stage (the stage features)."""
        h, w = self.config.image_size
        if images.shape[-3:-1] != (h, w):
            raise ConfigError(f"expected {h}x{w} images, got shape {images.shape}")
        grid = self.patch_embed(images)
        feats = []
        for stage in self.stages:
            grid = stage(grid)
            feats.append(grid)
        return feats

    def merge(self, i: int) -> PatchMerging:
        """Patch merging that feeds stage ``i`` (1..3, 0-based)."""
        return self.stages[i].merge


def backbone_forward(images: Tensor, backbone: Backbone) -> list[TokenGrid]:
    return backbone(images)


def check_stage_features(feats: list[TokenGrid], cfg: BackboneConfig) -> None:
    """Raise unless ``feats`` obeys the per-stage resolution/channel law."""
    if len(feats) != NUM_STAGES:
        raise ShapeError(f"expected {NUM_STAGES} stage grids, got {len(feats)}")
    for i, g in enumerate(feats):
        if (g.height, g.width) != cfg.stage_resolution(i) or g.channels != cfg.stage_channels(i):
            raise ShapeError(
                f"stage {i + 1}: got {g.height}x{g.width}x{g.channels}, expected "
                f"{cfg.stage_resolution(i)} with {cfg.stage_channels(i)} channels"
            )


# Official Swin checkpoints -> this backbone. Linear weights are stored
# [out, in] upstream and [in, out] here; conv patch weights [C, 3, p, p] are
# flattened in (row, col, channel) order. Upstream norms with no counterpart
# (patch_embed.norm, downsample.norm, final norm) are dropped by the importer.
SWIN_NAME_MAP = {
    "patch_embed.proj.weight": "patch_embed.proj.weight",
    "patch_embed.proj.bias": "patch_embed.proj.bias",
    "layers.{i}.blocks.{j}.norm1.weight": "stages.{i}.blocks.{j}.norm1.weight",
    "layers.{i}.blocks.{j}.norm1.bias": "stages.{i}.blocks.{j}.norm1.bias",
    "layers.{i}.blocks.{j}.attn.qkv.weight": "stages.{i}.blocks.{j}.attn.{q,k,v}.weight",
    "layers.{i}.blocks.{j}.attn.qkv.bias": "stages.{i}.blocks.{j}.attn.{q,k,v}.bias",
    "layers.{i}.blocks.{j}.attn.proj.weight": "stages.{i}.blocks.{j}.attn.proj.weight",
    "layers.{i}.blocks.{j}.attn.proj.bias": "stages.{i}.blocks.{j}.attn.proj.bias",
    "layers.{i}.blocks.{j}.attn.relative_position_bias_table": "stages.{i}.blocks.{j}.attn.bias_self",
    "layers.{i}.blocks.{j}.norm2.weight": "stages.{i}.blocks.{j}.norm2.weight",
    "layers.{i}.blocks.{j}.norm2.bias": "stages.{i}.blocks.{j}.norm2.bias",
    "layers.{i}.blocks.{j}.mlp.fc1.weight": "stages.{i}.blocks.{j}.mlp.fc1.weight",
    "layers.{i}.blocks.{j}.mlp.fc1.bias": "stages.{i}.blocks.{j}.mlp.fc1.bias",
    "layers.{i}.blocks.{j}.mlp.fc2.weight": "stages.{i}.blocks.{j}.mlp.fc2.weight",
    "layers.{i}.blocks.{j}.mlp.fc2.bias": "stages.{i}.blocks.{j}.mlp.fc2.bias",
    "layers.{i}.downsample.reduction.weight": "stages.{i+1}.merge.reduction.weight",
}


def import_swin_state(upstream: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], list[str]]:
    """Translate an official Swin state dict; returns ``(state, dropped_keys)``."""
    out: dict[str, np.ndarray] = {}
    dropped: list[str] = []
    for key, value in upstream.items():
        value = np.asarray(value)
        parts = key.split(".")
        if key == "patch_embed.proj.weight":
            c, cin, p, _ = value.shape
            out[key] = value.transpose(2, 3, 1, 0).reshape(p * p * cin, c)
        elif key == "patch_embed.proj.bias":
            out[key] = value
        elif parts[0] == "layers" and parts[2] == "blocks":
            i, j, rest = int(parts[1]), int(parts[3]), ".".join(parts[4:])
            base = f"stages.{i}.blocks.{j}"
            if rest in ("attn.qkv.weight", "attn.qkv.bias"):
                kind = rest.rsplit(".", 1)[1]
                for name, chunk in zip("qkv", np.split(value, 3, axis=0)):
                    out[f"{base}.attn.{name}.{kind}"] = chunk.T if kind == "weight" else chunk
            elif rest == "attn.relative_position_index":
                dropped.append(key)  # recomputed locally
            elif rest == "attn.relative_position_bias_table":
                out[f"{base}.attn.bias_self"] = value
            elif rest.endswith(".weight") and rest.split(".")[0] in ("attn", "mlp"):
                out[f"{base}.{rest}"] = value.T
            elif rest.split(".")[0] in ("norm1", "norm2", "attn", "mlp"):
                out[f"{base}.{rest}"] = value
            else:
                dropped.append(key)
        elif parts[0] == "layers" and parts[2:] == ["downsample", "reduction", "weight"]:
            out[f"stages.{int(parts[1]) + 1}.merge.reduction.weight"] = value.T
        else:
            dropped.append(key)
    return out, dropped
