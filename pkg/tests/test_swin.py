import sys
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.autodiff import functional as F
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import Tensor, parameter, set_default_dtype
from src.core.errors import ConfigError, ShapeError
from src.models.config import SwinConfig, get_variant
from src.models.heads import SwinClassifier
from src.models.swin import PatchEmbed, PatchMerging, SwinBackbone, SwinBlock, WindowAttention, swin_block_pair
from src.models.windows import NEG

TOY = SwinConfig(img_size=32, embed_dim=8, depths=(2, 2, 2, 2), num_heads=(2, 2, 2, 2), window_size=4,
                 drop_path_rate=0.0, variant="grad-toy")


@pytest.fixture(autouse=True)
def float64():
    set_default_dtype("float64")


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def weighted_output(seed=1):
    weights = {}

    def f(out):
        if "w" not in weights:
            weights["w"] = Tensor(np.random.default_rng(seed).standard_normal(out.shape))
        return F.sum(F.mul(out, weights["w"]))
    return f


def randomise_bias_tables(module, seed=0):
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if name.endswith("relative_position_bias_table"):
            p.data = rng.standard_normal(p.shape) * 0.5


# --- patch embedding and merging ---

def test_patch_embed_224():
    embed = PatchEmbed(4, 3, 96, rng=np.random.default_rng(0))
    out = embed(Tensor(np.zeros((1, 224, 224, 3))))
    assert out.shape == (1, 56, 56, 96)


def test_patch_embed_8x8():
    embed = PatchEmbed(4, 3, 16, rng=np.random.default_rng(0))
    assert embed(Tensor(np.zeros((2, 8, 8, 3)))).shape == (2, 2, 2, 16)


def test_patch_embed_identity_projection():
    c = 8
    embed = PatchEmbed(4, 3, c, rng=np.random.default_rng(0))
    embed.proj.weight.data = np.eye(48, c)
    images = np.random.default_rng(1).random((1, 8, 8, 3))
    out = embed(Tensor(images)).numpy()
    # flatten order inside a patch: row, column, channel
    first = images[0, 0:4, 0:4, :].reshape(-1)[:c]
    assert_allclose(out[0, 0, 0], np_layer_norm(first), atol=1e-10)
    second = images[0, 0:4, 4:8, :].reshape(-1)[:c]
    assert_allclose(out[0, 0, 1], np_layer_norm(second), atol=1e-10)


def test_patch_embed_rejects_indivisible_image():
    embed = PatchEmbed(4, 3, 8)
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((1, 10, 8, 3))))


def test_patch_merging_shapes():
    merge = PatchMerging(96, rng=np.random.default_rng(0))
    assert merge(Tensor(np.zeros((1, 56, 56, 96)))).shape == (1, 28, 28, 192)


def test_patch_merging_concat_order():
    d = 4
    merge = PatchMerging(d, rng=np.random.default_rng(0))
    merge.reduction.weight.data = np.eye(4 * d, 2 * d)
    x = np.random.default_rng(2).standard_normal((1, 2, 2, d))
    out = merge(Tensor(x)).numpy()[0, 0, 0]
    concat = np.concatenate([x[0, 0, 0], x[0, 1, 0], x[0, 0, 1], x[0, 1, 1]])
    assert_allclose(out, np_layer_norm(concat)[:2 * d], atol=1e-10)


def test_patch_merging_permutation():
    d = 2
    merge = PatchMerging(d, rng=np.random.default_rng(0))
    merge.reduction.weight.data = np.eye(4 * d, 2 * d)
    x = np.random.default_rng(3).standard_normal((1, 2, 2, d))
    # swapping the two columns swaps (TL, BL) with (TR, BR)
    swapped = x[:, :, ::-1, :]
    out = merge(Tensor(np.ascontiguousarray(swapped))).numpy()[0, 0, 0]
    concat = np.concatenate([x[0, 0, 1], x[0, 1, 1], x[0, 0, 0], x[0, 1, 0]])
    assert_allclose(out, np_layer_norm(concat)[:2 * d], atol=1e-10)


def test_patch_merging_rejects_odd_grid():
    with pytest.raises(ShapeError):
        PatchMerging(4)(Tensor(np.zeros((1, 3, 4, 4))))


# --- window attention ---

def test_attention_constant_values():
    attn = WindowAttention(8, 2, 2, rng=np.random.default_rng(0))
    randomise_bias_tables(attn)
    c = np.random.default_rng(1).standard_normal(8)
    attn.qkv.weight.data[:, 16:] = 0.0
    attn.qkv.bias.data[16:] = c
    windows = Tensor(np.random.default_rng(2).standard_normal((3, 4, 8)))
    out = attn(windows).numpy()
    expected = c @ attn.proj.weight.data + attn.proj.bias.data
    assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_attention_single_token_window():
    attn = WindowAttention(6, 3, 1, rng=np.random.default_rng(0))
    attn.relative_position_bias_table.data[:] = 5.0
    x = np.random.default_rng(1).standard_normal((4, 1, 6))
    v = x @ attn.qkv.weight.data[:, 12:] + attn.qkv.bias.data[12:]
    expected = v @ attn.proj.weight.data + attn.proj.bias.data
    mask = np.full((4, 1, 1), 0.0)
    assert_allclose(attn(Tensor(x), mask).numpy(), expected, atol=1e-12)


def test_masked_pairs_get_negligible_weight():
    scores = np.random.default_rng(0).uniform(-5, 5, size=(4, 9))
    mask = np.where(np.arange(9) % 2, NEG, 0.0)
    probs = F.softmax(Tensor(scores + mask)).numpy()
    assert probs[:, 1::2].max() < 1e-6


def test_attention_rejects_head_split():
    with pytest.raises(ConfigError):
        WindowAttention(10, 3, 2)


def test_attention_rejects_mask_window_count():
    attn = WindowAttention(4, 1, 2)
    with pytest.raises(ConfigError):
        attn(Tensor(np.zeros((3, 4, 4))), np.zeros((2, 4, 4)))


def test_attention_rows_are_convex_combinations():
    attn = WindowAttention(4, 1, 2, rng=np.random.default_rng(0))
    attn.proj.weight.data = np.eye(4)
    attn.proj.bias.data[:] = 0.0
    x = np.random.default_rng(5).standard_normal((2, 4, 4))
    v = x @ attn.qkv.weight.data[:, 8:] + attn.qkv.bias.data[8:]
    out = attn(Tensor(x)).numpy()
    assert np.all(out <= v.max(axis=1, keepdims=True) + 1e-12)
    assert np.all(out >= v.min(axis=1, keepdims=True) - 1e-12)


# --- blocks ---

def shifted_window_oracle(block, x):
    """Attention branch computed token by token over the contiguous part of each shifted window."""
    _, h, w, d = x.shape
    m, s = block.window, block.shift
    attn = block.attn
    heads, hd = attn.num_heads, d // attn.num_heads
    y = np_layer_norm(x[0], block.norm1.eps) * block.norm1.weight.data + block.norm1.bias.data
    qkv = y @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    table = attn.relative_position_bias_table.data

    def rolled(i, j):
        return (i - s) % h, (j - s) % w

    out = np.zeros((h, w, d))
    for i in range(h):
        for j in range(w):
            r, c = rolled(i, j)
            neighbours = []
            for i2 in range(h):
                for j2 in range(w):
                    r2, c2 = rolled(i2, j2)
                    same_window = r // m == r2 // m and c // m == c2 // m
                    contiguous = (r >= h - s) == (r2 >= h - s) and (c >= w - s) == (c2 >= w - s)
                    if same_window and (s == 0 or contiguous):
                        neighbours.append((i2, j2, r2, c2))
            for head in range(heads):
                sl = slice(head * hd, (head + 1) * hd)
                scores = []
                for i2, j2, r2, c2 in neighbours:
                    row = (r % m - r2 % m + m - 1) * (2 * m - 1) + (c % m - c2 % m + m - 1)
                    scores.append(q[i, j, sl] @ k[i2, j2, sl] * attn.scale + table[row, head])
                scores = np.array(scores)
                p = np.exp(scores - scores.max())
                p /= p.sum()
                out[i, j, sl] = sum(pk * v[i2, j2, sl] for pk, (i2, j2, _, _) in zip(p, neighbours))
    return (out @ attn.proj.weight.data + attn.proj.bias.data)[None]


@pytest.mark.parametrize("shift", [0, 2])
def test_shifted_attention_matches_region_oracle(shift):
    block = SwinBlock(16, 2, 4, shift, rng=np.random.default_rng(0))
    randomise_bias_tables(block)
    x = np.random.default_rng(1).standard_normal((1, 8, 8, 16))
    out = block.attention_branch(Tensor(x)).numpy()
    assert_allclose(out, shifted_window_oracle(block, x), atol=1e-5)


def test_zeroed_branches_are_identity():
    block = SwinBlock(16, 2, 4, 2, rng=np.random.default_rng(0))
    for layer in (block.attn.proj, block.mlp.fc2):
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 8, 8, 16))
    assert_allclose(block(Tensor(x)).numpy(), x)


def test_block_pair_gradient():
    regular = SwinBlock(16, 2, 4, 0, rng=np.random.default_rng(0))
    shifted = SwinBlock(16, 2, 4, 2, rng=np.random.default_rng(1))
    randomise_bias_tables(regular, 2)
    randomise_bias_tables(shifted, 3)
    f = weighted_output()
    x = parameter(np.random.default_rng(4).standard_normal((1, 8, 8, 16)))
    report = grad_check(lambda t: f(swin_block_pair(t, regular, shifted)), x, samples=200)
    assert report.passed, report.summary()


def test_padded_block_keeps_shape_and_gradient():
    block = SwinBlock(8, 2, 4, 2, rng=np.random.default_rng(0))
    randomise_bias_tables(block)
    f = weighted_output()
    x = parameter(np.random.default_rng(1).standard_normal((1, 5, 6, 8)))
    assert block(x).shape == (1, 5, 6, 8)
    report = grad_check(lambda t: f(block(t)), x, samples=120)
    assert report.passed, report.summary()


def test_bias_table_gradient():
    block = SwinBlock(16, 2, 4, 2, rng=np.random.default_rng(0))
    randomise_bias_tables(block)
    f = weighted_output()
    x = Tensor(np.random.default_rng(1).standard_normal((1, 8, 8, 16)))
    table = block.attn.relative_position_bias_table
    report = grad_check(lambda _: f(block(x)), table, samples=40)
    assert report.passed, report.summary()


def test_window_translation_equivariance():
    block = SwinBlock(16, 2, 4, 0, rng=np.random.default_rng(0))
    randomise_bias_tables(block)
    x = np.random.default_rng(1).standard_normal((1, 8, 8, 16))
    moved = np.roll(x, 4, axis=1)
    assert_allclose(block(Tensor(moved)).numpy(), np.roll(block(Tensor(x)).numpy(), 4, axis=1), atol=1e-10)


# --- backbone ---

def test_backbone_stage_shapes():
    backbone = SwinBackbone(TOY, seed=0)
    features = backbone(np.zeros((2, 32, 32, 3)))
    assert [f.shape for f in features] == [(2, 8, 8, 8), (2, 4, 4, 16), (2, 2, 2, 32), (2, 1, 1, 64)]


def test_backbone_rejects_resolution():
    backbone = SwinBackbone(TOY, seed=0)
    with pytest.raises(ConfigError):
        backbone(np.zeros((1, 64, 64, 3)))


@pytest.mark.parametrize("name,resolution,final", [("swin-t", None, (7, 768)), ("swin-b", 384, (12, 1024))])
def test_variant_dimension_flow(name, resolution, final):
    cfg = get_variant(name, resolution=resolution)
    assert (cfg.stage_resolution(3), cfg.stage_dim(3)) == final
    assert [cfg.stage_resolution(i) for i in range(4)][0] == final[0] * 8
    assert cfg.stage_window(3) == (final[0], 0)


def test_swin_b_384_uses_window_12():
    cfg = get_variant("swin-b", resolution=384)
    assert cfg.window_size == 12
    assert cfg.stage_window(0) == (12, 6)


def test_window_shrinks_on_small_stage():
    cfg = get_variant("swin-toy")
    assert cfg.stage_window(0) == (4, 2)
    assert cfg.stage_window(2) == (4, 0)
    assert cfg.stage_window(3) == (2, 0)


def test_backbone_passthrough_with_zeroed_branches():
    backbone = SwinBackbone(TOY, seed=0)
    for name, p in backbone.named_parameters():
        if name.endswith(("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias")):
            p.data[:] = 0.0
    images = np.random.default_rng(0).random((1, 32, 32, 3))
    x = backbone.patch_embed(Tensor(images))
    for stage in backbone.stages:
        x = stage.downsample(x) if stage.downsample is not None else x
    assert_allclose(backbone(images)[-1].numpy(), x.numpy(), atol=1e-12)


def test_drop_path_rates_ramp():
    rates = SwinConfig(drop_path_rate=0.2).drop_path_rates()
    assert rates[0] == 0.0
    assert rates[-1] == pytest.approx(0.2)
    assert np.all(np.diff(rates) > 0)


def test_config_rejects_odd_depth():
    with pytest.raises(ConfigError):
        SwinConfig(depths=(2, 3, 2, 2))
    with pytest.raises(ConfigError):
        SwinConfig(embed_dim=10, num_heads=(3, 6, 12, 24))


def test_full_model_gradient_at_toy_scale():
    model = SwinClassifier(TOY, seed=0)
    randomise_bias_tables(model)
    images = parameter(np.random.default_rng(1).random((1, 32, 32, 3)))
    labels = np.array([1])
    report = grad_check(lambda t: model.loss(t, labels), images, samples=40)
    assert report.passed, report.summary()
    table = model.backbone.stages[0].blocks[1].attn.relative_position_bias_table
    fixed = images.detach()
    report = grad_check(lambda _: model.loss(fixed, labels), table, samples=30)
    assert report.passed, report.summary()
