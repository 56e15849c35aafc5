import itertools

import numpy as np
import pytest

from cstformer import functional as F
from cstformer import tensor as T
from cstformer.errors import ConfigError, ShapeError
from cstformer.gradcheck import check_gradients
from cstformer.loss import adpit_loss
from cstformer.model import (
    IRFFN, LPU, CSTBlock, ModelConfig, build_encoder, build_model, fold_patches, patch_index,
    unfold_patches,
)
from cstformer.tensor import Tensor

from conftest import leaf

ALL_CONFIGS = list(itertools.product(("DST", "DCA", "ULE"), (True, False), ("front", "middle")))


def small_cfg(variant="ULE", use_cmt=True, pooling="front", **kw):
    base = dict(conv_filters=16, n_frames=50, n_mels=16, fc_hidden=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(variant=variant, use_cmt=use_cmt, pooling=pooling, **base)


def projected(fn, inputs, seed):
    r = Tensor(np.random.default_rng(seed).standard_normal(fn().shape))
    return lambda: T.tsum(T.mul(fn(), r))


# ------------------------------------------------------------- structure
@pytest.mark.parametrize("variant, cmt, pooling", ALL_CONFIGS)
def test_every_config_maps_to_multi_accdoa(variant, cmt, pooling):
    model = build_model(ModelConfig(variant=variant, use_cmt=cmt, pooling=pooling), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 7, 250, 64)).astype(np.float32)
    out = model(x)
    assert out.shape == (2, 50, 117)
    assert np.all(np.abs(out.data) < 1)
    T.tsum(out).backward()
    assert all(p.grad is not None and np.isfinite(p.grad).all() for p in model.parameters())
    # DCA keeps the M input channels in the batch until the head
    rows = 2 * 7 if variant == "DCA" else 2
    for block in model.cst:
        assert block.last_shapes["spectral"] == (rows * 50, 16, 64)
        assert block.last_shapes["temporal"] == (rows * 16, 50, 64)
        if variant == "ULE":
            assert block.last_shapes["channel"] == (20 * 2, 64, 40)
        elif variant == "DCA":
            assert block.last_shapes["channel"] == (2 * 50 * 16, 7, 64)
        else:
            assert "channel" not in block.last_shapes


@pytest.mark.parametrize("pooling", ["front", "middle"])
@pytest.mark.parametrize("variant, batch", [("ULE", 2), ("DST", 2), ("DCA", 14)])
def test_encoder_output_shape(variant, pooling, batch):
    cfg = ModelConfig(variant=variant, pooling=pooling)
    x = Tensor(np.random.default_rng(1).standard_normal((batch, 1 if variant == "DCA" else 7, 250, 64)))
    for blk in build_encoder(cfg):
        blk.reset_parameters(0)
        x = blk(x)
    assert x.shape == (batch, 64, 50, 16)


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(variant="XYZ").validate()
    with pytest.raises(ConfigError):
        ModelConfig(n_frames=251).validate()
    with pytest.raises(ConfigError):
        ModelConfig(patch=(7, 4)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(heads=6).validate()
    with pytest.raises(ConfigError):
        ModelConfig(pooling="late").validate()


def test_forward_rejects_wrong_input_shape():
    model = build_model(small_cfg())
    with pytest.raises(ShapeError):
        model(np.zeros((1, 4, 50, 16)))
    with pytest.raises(ConfigError):
        model(np.zeros((1, 7, 52, 16)))


def test_zero_head_gives_zero_output_and_no_events():
    from cstformer.metrics import decode
    model = build_model(small_cfg())
    for p in (*model.fc2.pair(),):
        p.data[...] = 0
    pred = model.predict(np.zeros((1, 7, 50, 16)))
    assert not pred.any()
    assert decode(pred[0]) == []


def test_config_dict_roundtrip():
    cfg = ModelConfig(variant="DCA", pooling="front", patch=(5, 2))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------- parameters
def ledger(variant, cmt, C=64, M=7, K=13, hidden=128, F_out=16, patch=40):
    """Hand-counted parameter totals."""
    mhsa = lambda e: 4 * (e * e + e)
    ln = lambda e: 2 * e
    enc = (1 if variant == "DCA" else M) * C * 9 + 2 * C + 2 * (C * C * 9 + 2 * C)
    block = 2 * (mhsa(C) + ln(C))
    if variant == "ULE":
        block += mhsa(patch) + ln(patch)
    elif variant == "DCA":
        block += mhsa(C) + ln(C)
    if cmt:
        lpu = C * 9 + C
        irffn = (C * 4 * C + 4 * C) + 8 * C + (4 * C * 9 + 4 * C) + 8 * C + (4 * C * C + C) + 2 * C
        block += lpu + irffn
    head = (C * F_out * hidden + hidden) + (hidden * 3 * 3 * K + 3 * 3 * K)
    return enc + 2 * block + head


@pytest.mark.parametrize("variant, cmt", list(itertools.product(("DST", "DCA", "ULE"), (True, False))))
def test_parameter_counts_match_ledger(variant, cmt):
    model = build_model(ModelConfig(variant=variant, use_cmt=cmt))
    assert model.num_parameters() == ledger(variant, cmt)


def test_ule_cmt_larger_than_dst():
    assert ledger("ULE", True) > ledger("DST", False)
    assert ledger("ULE", True) == 379669


# -------------------------------------------------------------- patches
@pytest.mark.parametrize("patch", [(10, 4), (5, 2), (1, 1), (50, 16), (25, 8)])
def test_fold_unfold_bit_exact(patch):
    rng = np.random.default_rng(patch[0] * 100 + patch[1])
    for _ in range(20):
        x = rng.standard_normal((2, 3, 50, 16)).astype(np.float32)
        u = unfold_patches(Tensor(x), *patch)
        assert u.shape == (2 * 800 // (patch[0] * patch[1]), 3, patch[0] * patch[1])
        assert np.array_equal(fold_patches(u, 2, 3, 50, 16, *patch).data, x)
        y = rng.standard_normal(u.shape)
        assert np.array_equal(unfold_patches(fold_patches(Tensor(y), 2, 3, 50, 16, *patch), *patch).data, y)


def test_unfold_table_shape():
    assert unfold_patches(Tensor(np.zeros((1, 64, 50, 16))), 10, 4).shape == (20, 64, 40)


def test_single_patch_is_flatten(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(unfold_patches(Tensor(x), 4, 4).data, x.reshape(2, 3, 16))


def test_index_map_exhaustive():
    B, C, Tn, Fn, pt, pf = 2, 2, 4, 4, 2, 2
    x = np.arange(B * C * Tn * Fn, dtype=np.float64).reshape(B, C, Tn, Fn)
    u = unfold_patches(Tensor(x), pt, pf).data
    seen = set()
    for b, c, t, f in itertools.product(range(B), range(C), range(Tn), range(Fn)):
        idx = patch_index(b, c, t, f, Tn, Fn, pt, pf)
        assert u[idx] == x[b, c, t, f]
        seen.add(idx)
    assert len(seen) == x.size


def test_unfold_divisibility_error():
    with pytest.raises(ConfigError):
        unfold_patches(Tensor(np.zeros((1, 1, 10, 6))), 10, 4)


# ------------------------------------------------------------ attention
def _block(variant, cmt=False, C=16, seed=0):
    cfg = small_cfg(variant, cmt)
    blk = CSTBlock(cfg)
    blk.reset_parameters(seed)
    blk.eval()
    return blk, cfg


def test_batched_attention_matches_per_slice_loops(rng):
    blk, cfg = _block("ULE")
    x = rng.standard_normal((2, 16, 10, 4))
    B, C, Tn, Fn = x.shape
    spec = blk.spectral_attention(Tensor(x)).data
    temp = blk.temporal_attention(Tensor(x)).data
    chan = blk.channel_attention(Tensor(x)).data
    for b in range(B):
        for t in range(Tn):
            s = Tensor(x[b, :, t, :].T[None])  # (1, F, C)
            ref = (s + blk.s_mhsa(blk.s_norm(s))).data[0].T
            np.testing.assert_allclose(spec[b, :, t, :], ref, atol=1e-6)
        for f in range(Fn):
            s = Tensor(x[b, :, :, f].T[None])  # (1, T, C)
            ref = (s + blk.t_mhsa(blk.t_norm(s))).data[0].T
            np.testing.assert_allclose(temp[b, :, :, f], ref, atol=1e-6)
        # one 10x4 patch covers the whole map here
        s = Tensor(x[b].reshape(1, C, 40))
        ref = (s + blk.c_mhsa(blk.c_norm(s))).data[0].reshape(C, Tn, Fn)
        np.testing.assert_allclose(chan[b], ref, atol=1e-6)


def test_dca_channel_attention_matches_per_position_loop(rng):
    blk, _ = _block("DCA")
    x = rng.standard_normal((2 * 7, 16, 3, 2))
    out = blk.channel_attention(Tensor(x)).data.reshape(2, 7, 16, 3, 2)
    xr = x.reshape(2, 7, 16, 3, 2)
    for b, t, f in itertools.product(range(2), range(3), range(2)):
        s = Tensor(xr[b, :, :, t, f][None])  # (1, M, C)
        ref = (s + blk.c_mhsa(blk.c_norm(s))).data[0]
        np.testing.assert_allclose(out[b, :, :, t, f], ref, atol=1e-6)


@pytest.mark.parametrize("variant", ["DST", "DCA", "ULE"])
def test_zero_attention_projections_give_identity(variant, rng):
    blk, _ = _block(variant)
    for name, p in blk.named_parameters():
        if "mhsa" in name:
            p.data[...] = 0
    n = 7 if variant == "DCA" else 1
    x = rng.standard_normal((2 * n, 16, 10, 4))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("pooling", ["front", "middle"])
def test_ule_with_zeroed_channel_attention_equals_dst(pooling, rng):
    x = rng.standard_normal((2, 7, 250, 64)).astype(np.float32)
    ule = build_model(ModelConfig(variant="ULE", pooling=pooling), seed=3).eval()
    dst = build_model(ModelConfig(variant="DST", pooling=pooling), seed=3).eval()
    for blk in ule.cst:
        blk.c_mhsa.out_proj.weight.data[...] = 0
        blk.c_mhsa.out_proj.bias.data[...] = 0
    np.testing.assert_allclose(ule(x).data, dst(x).data, atol=1e-6)


def test_dca_with_zeroed_channel_attention_skips_it(rng, monkeypatch):
    x = rng.standard_normal((2, 7, 50, 16))
    model = build_model(small_cfg("DCA"), seed=4, dtype=np.float64).eval()
    for blk in model.cst:
        blk.c_mhsa.out_proj.weight.data[...] = 0
        blk.c_mhsa.out_proj.bias.data[...] = 0
    zeroed = model(x).data
    monkeypatch.setattr(CSTBlock, "channel_attention", lambda self, x: x)
    np.testing.assert_allclose(zeroed, model(x).data, atol=1e-12)


# --------------------------------------------------------- sublayers
def test_lpu_and_irffn_zero_weights_are_identity(rng):
    x = rng.standard_normal((2, 8, 5, 4))
    lpu = LPU(8).reset_parameters(0)
    for p in lpu.parameters():
        p.data[...] = 0
    np.testing.assert_array_equal(lpu(Tensor(x)).data, x)
    ffn = IRFFN(8).reset_parameters(0)
    ffn.bn3.weight.data[...] = 0
    ffn.bn3.bias.data[...] = 0
    np.testing.assert_array_equal(ffn(Tensor(x)).data, x)
    assert lpu(Tensor(x)).shape == ffn(Tensor(x)).shape == x.shape


@pytest.mark.parametrize("variant, cmt", list(itertools.product(("DST", "DCA", "ULE"), (True, False))))
def test_block_preserves_shape(variant, cmt, rng):
    blk, _ = _block(variant, cmt)
    n = 7 if variant == "DCA" else 1
    assert blk(Tensor(rng.standard_normal((2 * n, 16, 10, 4)))).shape == (2 * n, 16, 10, 4)


def _gradcheck_module(module, x_shape, seed):
    module.reset_parameters(seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal(x_shape))
    # nudge parameters off their neat initial values (ones/zeros)
    for p in module.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    inputs = {"x": x, **dict(module.named_parameters())}
    fn = projected(lambda: module(x), inputs, 1000 + seed)
    return check_gradients(fn, inputs, max_coords=12, rng=rng)


@pytest.mark.parametrize("name", ["lpu", "irffn", "conv_block", "ule_cst", "dca_cst", "dst_cst"])
def test_module_gradients(name):
    for seed in range(5):
        if name == "lpu":
            mod, shape = LPU(4), (2, 4, 5, 4)
        elif name == "irffn":
            mod, shape = IRFFN(4), (2, 4, 5, 4)
        elif name == "conv_block":
            mod, shape = build_encoder(small_cfg(conv_filters=8))[0], (2, 7, 10, 4)
        else:
            variant = name.split("_")[0].upper()
            mod = CSTBlock(small_cfg(variant, True, conv_filters=8, heads=2, patch=(5, 2)))
            shape = ((14 if variant == "DCA" else 2), 8, 5, 4)
        errs = _gradcheck_module(mod, shape, seed)
        assert max(errs.values()) <= 1e-4, (name, seed, {k: v for k, v in errs.items() if v > 1e-4})


def test_fold_attention_unfold_gradients():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        blk, _ = _block("ULE")
        blk.astype(np.float64)
        x = leaf(rng.standard_normal((2, 16, 10, 4)))
        inputs = {"x": x, **{n: p for n, p in blk.named_parameters() if n.startswith("c_")}}
        fn = projected(lambda: blk.channel_attention(x), inputs, seed)
        errs = check_gradients(fn, inputs, max_coords=20, rng=rng)
        assert max(errs.values()) <= 1e-4


def test_full_model_gradient_smoke():
    model = build_model(small_cfg(), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 7, 50, 16))
    inputs = dict(model.named_parameters())
    fn = projected(lambda: model(x), inputs, 7)
    errs = check_gradients(fn, inputs, max_coords=1, rng=rng)
    assert max(errs.values()) <= 1e-4


# ------------------------------------------------------------- learning
def test_one_adam_step_decreases_loss():
    from cstformer.train import Adam
    model = build_model(ModelConfig(dropout=0.0), seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 7, 250, 64)).astype(np.float32)
    vec = np.zeros((2, 50, 3, 3, 13), np.float32)
    cnt = np.zeros((2, 50, 13), np.int64)
    vec[:, 10:30, :, 0, 3] = 1.0
    cnt[:, 10:30, 3] = 1
    opt = Adam(model.named_parameters())
    loss0 = adpit_loss(model(x), vec, cnt)
    loss0.backward()
    opt.step(1e-3)
    loss1 = adpit_loss(model(x), vec, cnt)
    assert loss1.data < loss0.data
