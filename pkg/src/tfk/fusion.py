"""Image-modality fusion (HMT), pooling heads, meta MLP and post-fusion (MTP)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    CrossAttentionParams,
    TokenGrid,
    cyclic_shift,
    cyclic_unshift,
    effective_window,
    mca,
    record_scope,
    window_partition,
    window_reverse,
    wmca,
)
from .backbone import NUM_STAGES, BackboneConfig, ConfigError, PatchMerging
from .core import functional as F
from .core.nn import MLP, LayerNorm, Linear, Module
from .core.tensor import ShapeError, Tensor

BRIDGES = ("sum", "backbone_only")
HMT_MODES = ("dual", "cli->der", "der->cli")


class FusionError(ShapeError):
    """Raised when modality features cannot be fused."""


@dataclass(frozen=True)
class HmtStackConfig:
    stage_counts: tuple[int, ...] = (1, 1, 1, 1)
    bridge: str = "sum"
    shift: bool = False
    mode: str = "dual"
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "stage_counts", tuple(int(c) for c in self.stage_counts))
        if len(self.stage_counts) != NUM_STAGES or any(c < 0 for c in self.stage_counts):
            raise ConfigError(f"hmt_stage_counts needs 4 nonnegative integers, got {self.stage_counts}")
        if self.bridge not in BRIDGES:
            raise ConfigError(f"hmt_bridge must be one of {BRIDGES}, got {self.bridge!r}")
        if self.mode not in HMT_MODES:
            raise ConfigError(f"hmt mode must be one of {HMT_MODES}, got {self.mode!r}")

    @property
    def total_blocks(self) -> int:
        return sum(self.stage_counts)


class HmtBranch(Module):
    """One direction of an HMT block: WMCA + residual, then LN + MLP + residual."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float = 4.0):
        self.attn = CrossAttentionParams(dim, heads, window)
        self.norm = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)


class HmtBlock(Module):
    """Dual-branch hierarchical multi-modal transformer block.

    ``der_branch`` lets dermoscopic tokens query both modalities (cli -> der);
    ``cli_branch`` is the mirror image. In a single-branch mode the other
    modality passes through unchanged.
    """

    def __init__(self, dim: int, heads: int, resolution: tuple[int, int], window: int,
                 shifted: bool = False, mode: str = "dual", mlp_ratio: float = 4.0):
        self.resolution = tuple(resolution)
        self.window, can_shift = effective_window(*self.resolution, window)
        self.shift = self.window // 2 if (shifted and can_shift) else 0
        self.mode = mode
        self.der_branch = HmtBranch(dim, heads, self.window, mlp_ratio) if mode in ("dual", "cli->der") else None
        self.cli_branch = HmtBranch(dim, heads, self.window, mlp_ratio) if mode in ("dual", "der->cli") else None

    def _branch(self, branch: HmtBranch, own: TokenGrid, win_own: Tensor, win_other: Tensor,
                mask: np.ndarray | None) -> TokenGrid:
        m, s = self.window, self.shift
        attn = window_reverse(wmca(win_own, win_other, branch.attn, mask), m, own.height, own.width)
        if s:
            attn = cyclic_unshift(attn, (s, s))
        ca = own.tokens + attn.tokens
        return TokenGrid(ca + branch.mlp(branch.norm(ca)))

    def forward(self, der: TokenGrid, cli: TokenGrid) -> tuple[TokenGrid, TokenGrid]:
        if der.tokens.shape != cli.tokens.shape:
            raise FusionError(f"modality grids differ: {der.tokens.shape} vs {cli.tokens.shape}")
        if (der.height, der.width) != self.resolution:
            raise FusionError(f"block built for {self.resolution}, got {der.height}x{der.width}")
        m, s = self.window, self.shift
        mask = None
        sd, sc = der, cli
        if s:
            sd, mask = cyclic_shift(der, (s, s), m)
            sc, _ = cyclic_shift(cli, (s, s), m)
        wd, wc = window_partition(sd, m), window_partition(sc, m)
        nw = (der.height // m) * (der.width // m)
        der_out, cli_out = der, cli
        if self.der_branch is not None:
            with record_scope(branch="cli->der", windows=nw):
                der_out = self._branch(self.der_branch, der, wd, wc, mask)
        if self.cli_branch is not None:
            with record_scope(branch="der->cli", windows=nw):
                cli_out = self._branch(self.cli_branch, cli, wc, wd, mask)
        return der_out, cli_out


def hmt_block(der: TokenGrid, cli: TokenGrid, block: HmtBlock) -> tuple[TokenGrid, TokenGrid]:
    return block(der, cli)


class HmtStage(Module):
    def __init__(self, blocks: list[HmtBlock]):
        self.blocks = blocks


class HmtStack(Module):
    """HMT blocks stacked stage by stage.

    At each stage the input is the backbone feature, plus (bridge ``sum``)
    the previous stage's fused output carried through that modality's
    patch-merging layer. Stages with zero blocks forward their input.
    """

    def __init__(self, backbone: BackboneConfig, config: HmtStackConfig):
        self.config = config
        self.stages = []
        for i, count in enumerate(config.stage_counts):
            self.stages.append(HmtStage([
                HmtBlock(backbone.stage_channels(i), backbone.stage_heads[i], backbone.stage_resolution(i),
                         backbone.window, shifted=config.shift and bool(j % 2), mode=config.mode,
                         mlp_ratio=config.mlp_ratio)
                for j in range(count)
            ]))

    def forward(self, der_feats: list[TokenGrid], cli_feats: list[TokenGrid],
                der_merges: list[PatchMerging | None], cli_merges: list[PatchMerging | None]
                ) -> tuple[TokenGrid, TokenGrid]:
        carry: tuple[TokenGrid, TokenGrid] | None = None
        der = cli = None
        for i, stage in enumerate(self.stages):
            der, cli = der_feats[i], cli_feats[i]
            if carry is not None and self.config.bridge == "sum":
                der = TokenGrid(der.tokens + der_merges[i](carry[0]).tokens)
                cli = TokenGrid(cli.tokens + cli_merges[i](carry[1]).tokens)
            if not stage.blocks and carry is None:
                continue
            for j, blk in enumerate(stage.blocks):
                with record_scope(stage=i + 1, block=j):
                    der, cli = blk(der, cli)
            carry = (der, cli)
        return der, cli


def hmt_stack(der_feats, cli_feats, stack: HmtStack, der_merges, cli_merges):
    return stack(der_feats, cli_feats, der_merges, cli_merges)


class Head(Module):
    """Global average pool over tokens followed by a linear map."""

    def __init__(self, channels: int, out_dim: int = 128):
        self.fc = Linear(channels, out_dim)

    def forward(self, grid: TokenGrid) -> Tensor:
        pooled = F.mean(grid.flat(), axis=1)
        return self.fc(pooled)


class MetaMLP(Module):
    """One-hot meta vector -> f_meta^0 through two linear layers with GELU."""

    def __init__(self, in_dim: int = 20, out_dim: int = 128):
        self.fc1 = Linear(in_dim, out_dim)
        self.fc2 = Linear(out_dim, out_dim)

    def forward(self, onehot: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(onehot)))


class MtpBlock(Module):
    """Post-fusion of image vectors into the meta feature.

    The key/value sequence stacks ``[f_meta^0, f_img...]`` as separate
    tokens; ``norm_meta`` normalises the meta token (query and first key),
    ``norm_img`` every image token.
    """

    def __init__(self, dim: int = 128, heads: int = 4, mlp_ratio: float = 4.0):
        self.norm_meta = LayerNorm(dim)
        self.norm_img = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads)
        self.norm = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, f_meta0: Tensor, images: list[Tensor]) -> tuple[Tensor, Tensor]:
        b, d = f_meta0.shape
        for f in images:
            if f.shape != (b, d):
                raise FusionError(f"image feature {f.shape} does not match meta feature {(b, d)}")
        q = self.norm_meta(f_meta0).reshape(b, 1, d)
        img = F.concat([f.reshape(b, 1, d) for f in images], axis=1)
        kv = F.concat([q, self.norm_img(img)], axis=1)
        with record_scope(branch="meta", stage=0, block=0, windows=1):
            ca = mca(q, kv, self.attn).reshape(b, d) + f_meta0
        return ca + self.mlp(self.norm(ca)), ca


def mtp_block(f_meta0: Tensor, f_cli: Tensor, f_der: Tensor, block: MtpBlock) -> Tensor:
    return block(f_meta0, [f_cli, f_der])[0]
