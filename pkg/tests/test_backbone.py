import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_module
from tfk.attention import TokenGrid
from tfk.backbone import (
    SWIN_NAME_MAP,
    Backbone,
    BackboneConfig,
    ConfigError,
    MergeError,
    PatchEmbed,
    PatchMerging,
    backbone_forward,
    check_stage_features,
    import_swin_state,
    merge_gather,
)
from tfk.core import Rng, Tensor, grad_check
from tfk.model import TFormerConfig, build_model, count_parameters


def test_patch_embed_224_resolution():
    pe = PatchEmbed(4, 8).initialise(Rng(0))
    assert pe(Tensor(np.zeros((224, 224, 3)))).tokens.shape == (1, 56, 56, 8)


def test_patch_embed_toy_resolution():
    pe = PatchEmbed(4, 16).initialise(Rng(0))
    g = pe(Tensor(Rng(1).random((64, 64, 3))))
    assert (g.height, g.width, g.channels) == (16, 16, 16)
    assert pe.proj.weight.shape == (48, 16)


def test_patch_embed_constant_image():
    pe = PatchEmbed(4, 16).initialise(Rng(0))
    toks = pe(Tensor(np.full((1, 16, 16, 3), 0.3))).tokens.data.reshape(-1, 16)
    np.testing.assert_array_equal(toks, np.repeat(toks[:1], len(toks), axis=0))


def test_patch_embed_divisibility():
    with pytest.raises(ConfigError):
        PatchEmbed(4, 8)(Tensor(np.zeros((1, 10, 12, 3))))


def test_patch_embed_matches_strided_convolution():
    p, c = 2, 3
    pe = PatchEmbed(p, c).initialise(Rng(0))
    img = Rng(1).random((4, 6, 3))
    out = pe(Tensor(img)).tokens.data[0]
    w = pe.proj.weight.data
    for r in range(2):
        for q in range(3):
            patch = img[r * p:(r + 1) * p, q * p:(q + 1) * p]  # [p, p, 3], flattened row, col, channel
            ref = [sum(patch[i, j, ch] * w[(i * p + j) * 3 + ch, k]
                       for i in range(p) for j in range(p) for ch in range(3)) for k in range(c)]
            np.testing.assert_allclose(out[r, q], ref, atol=1e-12)


# -- patch merging ---------------------------------------------------------------

def test_merge_hand_computation():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    g = TokenGrid(Tensor(np.array([[a, b], [c, d]]).reshape(1, 2, 2, 1)))
    # gather order: top-left, bottom-left, top-right, bottom-right
    np.testing.assert_array_equal(merge_gather(g.tokens).data.ravel(), [a, c, b, d])
    pm = PatchMerging(1)
    pm.reduction.weight.data = np.ones((4, 2))
    np.testing.assert_array_equal(pm(g).tokens.data.ravel(), [a + b + c + d] * 2)


def test_merge_halves_and_doubles():
    pm = PatchMerging(6).initialise(Rng(0))
    out = pm(TokenGrid(Tensor(np.zeros((2, 8, 8, 6)))))
    assert out.tokens.shape == (2, 4, 4, 12)
    assert pm.reduction.weight.shape == (24, 12) and pm.reduction.bias is None


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_merge_gather_is_bijection(hh, ww, c):
    n = 4 * hh * ww * c
    x = Tensor(np.arange(float(n)).reshape(1, 2 * hh, 2 * ww, c))
    assert sorted(merge_gather(x).data.ravel().tolist()) == list(range(n))


def test_merge_odd_extents():
    with pytest.raises(MergeError):
        merge_gather(Tensor(np.zeros((1, 3, 4, 2))))


# -- backbone ------------------------------------------------------------------

def test_backbone_toy_stage_law():
    cfg = BackboneConfig()
    bb = Backbone(cfg).initialise(Rng(0))
    feats = backbone_forward(Tensor(Rng(1).random((2, 64, 64, 3))), bb)
    assert [(f.height, f.channels) for f in feats] == [(16, 16), (8, 32), (4, 64), (2, 128)]
    assert all(f.batch == 2 for f in feats)
    check_stage_features(feats, cfg)


def test_swin_tiny_layout():
    cfg = BackboneConfig(image_size=(224, 224), base_channels=96, stage_depths=(2, 2, 6, 2),
                         stage_heads=(3, 6, 12, 24), window=7)
    assert [cfg.stage_resolution(i) for i in range(4)] == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert [cfg.stage_channels(i) for i in range(4)] == [96, 192, 384, 768]


def test_depth_layout_and_shift_alternation():
    cfg = BackboneConfig(image_size=(64, 64), base_channels=8, stage_depths=(2, 2, 6, 2),
                         stage_heads=(1, 2, 2, 4), window=4)
    bb = Backbone(cfg)
    assert [len(s.blocks) for s in bb.stages] == [2, 2, 6, 2]
    assert [b.shift for b in bb.stages[0].blocks] == [0, 2]
    assert [b.shift for b in bb.stages[2].blocks] == [0, 0, 0, 0, 0, 0]  # 4x4 grid fits one window
    assert bb.stages[3].blocks[0].window == 2


@pytest.mark.parametrize("bad", [
    dict(image_size=(60, 64)),
    dict(stage_depths=(1, 1, 1)),
    dict(stage_heads=(3, 2, 4, 4)),
    dict(stage_depths=(1, -1, 1, 1)),
    dict(window=0),
    dict(window=3),  # 16x16 first-stage grid
])
def test_backbone_config_errors(bad):
    with pytest.raises(ConfigError):
        BackboneConfig(**bad)


def test_backbone_wrong_image_size():
    bb = Backbone(BackboneConfig()).initialise(Rng(0))
    with pytest.raises(ConfigError):
        bb(Tensor(np.zeros((1, 32, 32, 3))))


configs = st.builds(
    lambda p, mult, c, m, depths, h1: BackboneConfig(
        image_size=(p * 8 * mult[0], p * 8 * mult[1]), patch_size=p, base_channels=c * h1,
        stage_depths=depths, stage_heads=(h1, h1, h1, h1), window=m),
    st.sampled_from([1, 2]), st.tuples(st.integers(1, 2), st.integers(1, 2)), st.integers(1, 3),
    st.sampled_from([1, 2, 4]), st.tuples(*[st.integers(0, 2)] * 4), st.integers(1, 2),
)


@given(configs)
def test_stage_law_property(cfg):
    bb = Backbone(cfg).initialise(Rng(0))
    feats = bb(Tensor(Rng(1).random((1, *cfg.image_size, 3))))
    h, w = cfg.image_size
    for i, f in enumerate(feats, start=1):
        f_ = cfg.patch_size * 2 ** (i - 1)
        assert (f.height, f.width, f.channels) == (h // f_, w // f_, cfg.base_channels * 2 ** (i - 1))


def test_backbone_deterministic_and_gradients():
    cfg = BackboneConfig(image_size=(16, 16), patch_size=2, base_channels=4, stage_depths=(1, 1, 1, 1),
                         stage_heads=(1, 1, 1, 1), window=2)
    bb = random_module(Backbone(cfg), 0)
    img = Tensor(Rng(1).random((1, 16, 16, 3)))
    a = [f.tokens.data for f in bb(img)]
    b = [f.tokens.data for f in bb(img)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    proj = [Tensor(Rng(2).split(str(i)).normal(size=f.shape)) for i, f in enumerate(a)]

    def f():
        return sum(((g.tokens * r).sum() for g, r in zip(bb(img), proj)), Tensor(0.0))

    params = [p for n, p in bb.named_parameters() if not n.endswith("k.bias")]
    assert grad_check(f, [img] + params, eps=1e-5, max_coords=60, rng=Rng(3)) < 1e-4


# -- weight sharing --------------------------------------------------------------

def test_shared_weights_audit():
    plain = build_model(TFormerConfig(), 0)
    shared = build_model(TFormerConfig(backbone=BackboneConfig(shared_weights=True)), 0)
    assert shared.branch_parameter_names("der") == shared.branch_parameter_names("cli")
    assert plain.branch_parameter_names("der") == plain.branch_parameter_names("cli")
    one_backbone = plain.backbone_der.num_parameters()
    assert count_parameters(plain)["total"] - count_parameters(shared)["total"] == one_backbone
    assert "backbone_cli" not in count_parameters(shared)


def test_shared_weights_give_identical_features():
    model = build_model(TFormerConfig(backbone=BackboneConfig(shared_weights=True)), 0)
    img = Tensor(Rng(4).random((1, 64, 64, 3)))
    for a, b in zip(model.backbone_der(img), model.backbone_cli(img)):
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


# -- pretrained import -----------------------------------------------------------

def _upstream_state(cfg: BackboneConfig, rng: Rng) -> dict:
    """Fake official-layout state dict ([out, in] linears, conv patch weights)."""
    c, p = cfg.base_channels, cfg.patch_size
    st_ = {"patch_embed.proj.weight": rng.normal(size=(c, 3, p, p)), "patch_embed.proj.bias": rng.normal(size=c),
           "patch_embed.norm.weight": np.ones(c), "norm.weight": np.ones(8 * c)}
    for i in range(4):
        ci, h = cfg.stage_channels(i), cfg.stage_heads[i]
        m = min(cfg.window, *cfg.stage_resolution(i))
        for j in range(cfg.stage_depths[i]):
            b = f"layers.{i}.blocks.{j}"
            st_.update({
                f"{b}.norm1.weight": rng.normal(size=ci), f"{b}.norm1.bias": rng.normal(size=ci),
                f"{b}.attn.qkv.weight": rng.normal(size=(3 * ci, ci)), f"{b}.attn.qkv.bias": rng.normal(size=3 * ci),
                f"{b}.attn.proj.weight": rng.normal(size=(ci, ci)), f"{b}.attn.proj.bias": rng.normal(size=ci),
                f"{b}.attn.relative_position_bias_table": rng.normal(size=((2 * m - 1) ** 2, h)),
                f"{b}.attn.relative_position_index": np.zeros((m * m, m * m)),
                f"{b}.norm2.weight": rng.normal(size=ci), f"{b}.norm2.bias": rng.normal(size=ci),
                f"{b}.mlp.fc1.weight": rng.normal(size=(4 * ci, ci)), f"{b}.mlp.fc1.bias": rng.normal(size=4 * ci),
                f"{b}.mlp.fc2.weight": rng.normal(size=(ci, 4 * ci)), f"{b}.mlp.fc2.bias": rng.normal(size=ci),
            })
        if i < 3:
            st_[f"layers.{i}.downsample.reduction.weight"] = rng.normal(size=(2 * ci, 4 * ci))
            st_[f"layers.{i}.downsample.norm.weight"] = np.ones(4 * ci)
    return st_


def test_import_swin_state_loads_and_matches_convolution():
    cfg = BackboneConfig(image_size=(32, 32), base_channels=4, stage_depths=(1, 2, 1, 1),
                         stage_heads=(1, 1, 2, 2), window=2)
    upstream = _upstream_state(cfg, Rng(0))
    state, dropped = import_swin_state(upstream)
    bb = Backbone(cfg)
    bb.load_state_dict(state)
    assert "norm.weight" in dropped and "patch_embed.norm.weight" in dropped
    q = bb.stages[1].blocks[1].attn.q.weight.data
    np.testing.assert_array_equal(q, upstream["layers.1.blocks.1.attn.qkv.weight"][:8].T)
    # patch embedding equals the upstream stride-p convolution
    img = Rng(1).random((1, 32, 32, 3))
    tok = bb.patch_embed(Tensor(img)).tokens.data[0, 1, 2]
    w, b = upstream["patch_embed.proj.weight"], upstream["patch_embed.proj.bias"]
    patch = img[0, 4:8, 8:12].transpose(2, 0, 1)  # [3, p, p]
    np.testing.assert_allclose(tok, np.einsum("cihw,ihw->c", w, patch) + b, atol=1e-12)
    assert len(SWIN_NAME_MAP) == 16
