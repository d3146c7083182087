import math

import numpy as np
import pytest

from cnnav.backbone import (
    BackboneConfig,
    backbone_forward,
    backbone_param_count,
    baseline_forward,
    init_backbone,
    init_baseline_head,
)
from cnnav.engine import ShapeError, Tensor, shadow_mode, softmax_cross_entropy


def _backbone(cfg, seed=0):
    params, buffers = {}, {}
    init_backbone(cfg, np.random.default_rng(seed), params, buffers)
    return params, buffers


@pytest.mark.parametrize("train", [False, True])
def test_default_stage_shapes(train):
    cfg = BackboneConfig()
    params, buffers = _backbone(cfg)
    x = Tensor(np.random.default_rng(1).random((2, 3, 64, 64)).astype(np.float32))
    feats = backbone_forward(x, cfg, params, buffers, train=train)
    assert feats.s3.shape == (2, 32, 8, 8)
    assert feats.s4.shape == (2, 64, 4, 4)
    assert feats.s5.shape == (2, 128, 2, 2)


@pytest.mark.parametrize("size", [32, 64, 96])
def test_stage_sizes_follow_halving(size):
    cfg = BackboneConfig(input_size=size, stage_channels=(2, 2, 3, 4, 5))
    params, buffers = _backbone(cfg)
    feats = backbone_forward(Tensor(np.zeros((1, 3, size, size), np.float32)), cfg, params, buffers)
    for stage, f in zip((3, 4, 5), feats.levels()):
        assert f.shape[2:] == (size // 2**stage, size // 2**stage)
    assert [f.shape[1] for f in feats.levels()] == [3, 4, 5]


def test_size_mismatch_raises():
    cfg = BackboneConfig()
    params, buffers = _backbone(cfg)
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)), cfg, params, buffers)


@pytest.mark.parametrize(
    "kwargs",
    [{"input_size": 48}, {"input_size": 0}, {"stage_channels": (8, 16, 0, 64, 128)}, {"stage_channels": (8, 16)}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)


def test_zero_input_and_weights_give_zero_features():
    cfg = BackboneConfig()
    params, buffers = _backbone(cfg)
    for name, p in params.items():
        if name.endswith(".weight"):
            p.data[...] = 0.0
    feats = backbone_forward(Tensor(np.zeros((2, 3, 64, 64), np.float32)), cfg, params, buffers, train=False)
    for f in feats.levels():
        assert not f.data.any()


def test_param_count_matches_layer_by_layer_tally():
    # stage: 3x3 conv (no bias) + bn; block: two 3x3 convs + two bns
    #   stage1  216 + 16    + 2*(576 + 16)       =   1416
    #   stage2  1152 + 32   + 2*(2304 + 32)      =   5856
    #   stage3  4608 + 64   + 2*(9216 + 64)      =  23232
    #   stage4  18432 + 128 + 2*(36864 + 128)    =  92544
    #   stage5  73728 + 256 + 2*(147456 + 256)   = 369408
    cfg = BackboneConfig()
    params, _ = _backbone(cfg)
    assert backbone_param_count(cfg) == 492456
    assert sum(p.size for p in params.values()) == 492456


@pytest.mark.parametrize("blocks", [0, 2])
def test_param_count_other_depths(blocks):
    cfg = BackboneConfig(blocks_per_stage=blocks, stage_channels=(3, 4, 5, 6, 7))
    params, _ = _backbone(cfg)
    assert backbone_param_count(cfg) == sum(p.size for p in params.values())


def test_zero_residual_branch_is_identity():
    rng = np.random.default_rng(2)
    with_block = BackboneConfig(input_size=32, stage_channels=(4, 4, 6, 6, 8), blocks_per_stage=1)
    no_block = BackboneConfig(input_size=32, stage_channels=(4, 4, 6, 6, 8), blocks_per_stage=0)
    params, buffers = _backbone(with_block)
    for name, p in params.items():
        if ".block0.conv2." in name:
            p.data[...] = 0.0
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    a = backbone_forward(x, with_block, params, buffers, train=False)
    b = backbone_forward(x, no_block, params, buffers, train=False)
    for fa, fb in zip(a.levels(), b.levels()):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_baseline_logit_shape():
    cfg = BackboneConfig(num_classes=5)
    params, buffers = _backbone(cfg)
    init_baseline_head(cfg, np.random.default_rng(0), params)
    logits = baseline_forward(Tensor(np.zeros((3, 3, 64, 64), np.float32)), cfg, params, buffers)
    assert logits.shape == (3, 5)


@pytest.mark.parametrize("k", [2, 4, 10])
def test_zero_head_gives_uniform_loss(k):
    cfg = BackboneConfig(input_size=32, num_classes=k)
    params, buffers = _backbone(cfg)
    init_baseline_head(cfg, np.random.default_rng(0), params)
    params["baseline.fc.weight"].data[...] = 0.0
    with shadow_mode():
        x = Tensor(np.random.default_rng(3).random((4, 3, 32, 32)))
        logits = baseline_forward(x, cfg, params, buffers)
    assert not logits.data.any()
    loss = softmax_cross_entropy(logits, np.arange(4) % k)
    assert float(loss.data) == pytest.approx(math.log(k), rel=1e-12)
