"""Network configuration, parameter bookkeeping, attention blocks, and the
full forward pass against a plain-numpy replica."""

import math

import numpy as np
import pytest
from scipy.special import erf

from fusformer.autograd import Tensor
from fusformer.model import (
    FusformerConfig,
    decoder_block,
    encoder_block,
    fold_tokens,
    forward,
    init_params,
    multi_head_attention,
    param_count,
    parameter_shapes,
    pixel_tokenize,
    predictor,
    reshape_refine,
    validate_params,
)
from fusformer.rng import new_rng

SMALL = FusformerConfig(
    hsi_bands=4, msi_bands=2, embed_dim=6, heads=2, mlp_hidden=8, refine_kernel=3
)


def small_inputs(seed, h=3, w=4, cfg=SMALL):
    gen = new_rng(seed)
    up = gen.uniform(0.0, 1.0, size=(h, w, cfg.hsi_bands)).astype(np.float32)
    msi = gen.uniform(0.0, 1.0, size=(h, w, cfg.msi_bands)).astype(np.float32)
    return up, msi


def randomized_params(cfg, seed):
    """Init params but break the zero final conv so the head contributes."""
    params = init_params(cfg, seed)
    gen = new_rng(seed + 1)
    for name in ("refine.conv2.w", "refine.conv2.b"):
        shape = params[name].shape
        params[name].data[...] = gen.uniform(-0.2, 0.2, size=shape).astype(np.float32)
    return params


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        FusformerConfig(embed_dim=48, heads=5)
    with pytest.raises(ValueError):
        FusformerConfig(refine_kernel=2)
    with pytest.raises(ValueError):
        FusformerConfig(encoder_depth=0)
    with pytest.raises(ValueError):
        FusformerConfig(hsi_bands=0)
    with pytest.raises(ValueError):
        FusformerConfig(mlp_hidden=0)
    assert FusformerConfig(embed_dim=48, heads=6).head_dim == 8


def test_config_dict_round_trip():
    cfg = FusformerConfig(hsi_bands=8, heads=4, embed_dim=16, rls=False)
    assert FusformerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FusformerConfig.from_dict({"hsi_bands": 8, "novelty": 1})


# ---------------------------------------------------------------------------
# parameter table


def test_default_param_count_bracket():
    n = param_count(FusformerConfig())
    assert 80_000 <= n <= 120_000


def test_embed_parameter_sizes():
    shapes = dict((name, shape) for name, shape, _ in parameter_shapes(FusformerConfig()))
    assert shapes["embed.w"] == (34, 48)
    assert shapes["embed.b"] == (48,)


def test_param_count_is_additive_in_encoder_depth():
    base = param_count(FusformerConfig())
    deeper_cfg = FusformerConfig(encoder_depth=2)
    block = sum(
        int(np.prod(shape))
        for name, shape, _ in parameter_shapes(deeper_cfg)
        if name.startswith("encoder.1.")
    )
    assert param_count(deeper_cfg) == base + block
    assert block > 0


def test_init_params_determinism_and_rules():
    cfg = SMALL
    a = init_params(cfg, 3)
    b = init_params(cfg, 3)
    c = init_params(cfg, 4)
    assert set(a) == {name for name, _, _ in parameter_shapes(cfg)}
    some_weight_differs = False
    for name, shape, kind in parameter_shapes(cfg):
        t = a[name]
        assert t.shape == shape and t.data.dtype == np.float32 and t.requires_grad
        np.testing.assert_array_equal(t.data, b[name].data)
        if kind == "uniform":
            bound = math.sqrt(1.0 / np.prod(shape[:-1]))
            assert np.all(np.abs(t.data) <= bound)
            some_weight_differs |= not np.array_equal(t.data, c[name].data)
        elif kind == "ones":
            np.testing.assert_array_equal(t.data, 1.0)
        else:
            np.testing.assert_array_equal(t.data, 0.0)
    assert some_weight_differs


def test_validate_params_errors():
    cfg = SMALL
    params = init_params(cfg, 0)
    validate_params(params, cfg)

    missing = dict(params)
    del missing["embed.b"]
    with pytest.raises(ValueError, match="embed.b"):
        validate_params(missing, cfg)

    extra = dict(params)
    extra["rogue"] = Tensor(np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError, match="rogue"):
        validate_params(extra, cfg)

    wrong = dict(params)
    wrong["embed.w"] = Tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="embed.w"):
        validate_params(wrong, cfg)


# ---------------------------------------------------------------------------
# token layout


def test_pixel_tokenize_layout():
    up = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    msi = np.arange(100, 104, dtype=np.float32).reshape(2, 2, 1)
    tokens = pixel_tokenize(up, msi)
    assert tokens.shape == (4, 3)
    # row i*W + j holds pixel (i, j): HSI bands first, then MSI
    np.testing.assert_array_equal(tokens[0], [0, 1, 100])
    np.testing.assert_array_equal(tokens[1], [2, 3, 101])
    np.testing.assert_array_equal(tokens[2], [4, 5, 102])
    np.testing.assert_array_equal(tokens[3], [6, 7, 103])


def test_fold_tokens_inverts_tokenize():
    up, msi = small_inputs(5)
    tokens = pixel_tokenize(up, msi)
    cube = fold_tokens(tokens, 3, 4)
    np.testing.assert_array_equal(cube[:, :, :4], up)
    np.testing.assert_array_equal(cube[:, :, 4:], msi)
    with pytest.raises(ValueError):
        fold_tokens(tokens, 2, 4)


def test_pixel_tokenize_errors():
    with pytest.raises(ValueError):
        pixel_tokenize(np.zeros((2, 2), dtype=np.float32), np.zeros((2, 2, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        pixel_tokenize(np.zeros((2, 2, 3), dtype=np.float32), np.zeros((2, 3, 1), dtype=np.float32))


# ---------------------------------------------------------------------------
# attention


def attn_params(seed, f, prefix="a"):
    gen = new_rng(seed)
    params = {}
    for part in ("q", "k", "v", "o"):
        params[f"{prefix}.w{part}"] = Tensor(
            gen.uniform(-0.5, 0.5, size=(f, f)).astype(np.float32)
        )
        params[f"{prefix}.b{part}"] = Tensor(
            gen.uniform(-0.5, 0.5, size=(f,)).astype(np.float32)
        )
    return params


def test_attention_zero_params_returns_output_bias():
    f = 4
    params = {}
    for part in ("q", "k", "v", "o"):
        params[f"a.w{part}"] = Tensor(np.zeros((f, f), dtype=np.float32))
        params[f"a.b{part}"] = Tensor(np.zeros(f, dtype=np.float32))
    params["a.bo"] = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))
    x = Tensor(new_rng(0).uniform(-1, 1, size=(3, f)).astype(np.float32))
    out = multi_head_attention(x, x, params, "a", heads=2)
    np.testing.assert_array_equal(out.data, np.tile([1, 2, 3, 4], (3, 1)).astype(np.float32))


def test_attention_single_token_closed_form():
    # One token attends only to itself: out = (x Wv + bv) Wo + bo.
    f = 6
    params = attn_params(7, f)
    x64 = new_rng(8).uniform(-1, 1, size=(1, f))
    x = Tensor(x64, dtype=np.float64)
    p64 = {k: Tensor(v.data, dtype=np.float64) for k, v in params.items()}
    out = multi_head_attention(x, x, p64, "a", heads=3)
    v = x.data @ p64["a.wv"].data + p64["a.bv"].data
    want = v @ p64["a.wo"].data + p64["a.bo"].data
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_attention_matches_numpy_head_loop():
    f, heads, n = 6, 2, 5
    params = attn_params(9, f)
    p64 = {k: Tensor(v.data, dtype=np.float64) for k, v in params.items()}
    gen = new_rng(10)
    xq = gen.uniform(-1, 1, size=(n, f))
    xkv = gen.uniform(-1, 1, size=(4, f))
    out = multi_head_attention(
        Tensor(xq, dtype=np.float64), Tensor(xkv, dtype=np.float64), p64, "a", heads
    ).data

    q = xq @ p64["a.wq"].data + p64["a.bq"].data
    k = xkv @ p64["a.wk"].data + p64["a.bk"].data
    v = xkv @ p64["a.wv"].data + p64["a.bv"].data
    d = f // heads
    merged = np.zeros((n, f))
    for i in range(heads):
        qi, ki, vi = (m[:, i * d : (i + 1) * d] for m in (q, k, v))
        logits = qi @ ki.T / math.sqrt(d)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        merged[:, i * d : (i + 1) * d] = (e / e.sum(axis=1, keepdims=True)) @ vi
    want = merged @ p64["a.wo"].data + p64["a.bo"].data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_attention_rejects_width_mismatch():
    params = attn_params(0, 4)
    x = Tensor(np.zeros((2, 4), dtype=np.float32))
    y = Tensor(np.zeros((2, 6), dtype=np.float32))
    with pytest.raises(ValueError):
        multi_head_attention(x, y, params, "a", heads=2)
    with pytest.raises(ValueError):
        multi_head_attention(x, x, params, "a", heads=3)


# ---------------------------------------------------------------------------
# blocks


def zeroed_block_params(cfg, seed, prefix_list):
    """Random params with attention output and MLP second layer zeroed, which
    turns every residual branch into an exact no-op."""
    params = init_params(cfg, seed)
    for name in params:
        if name.endswith((".wo", ".bo")) or (".mlp." in name and name.endswith(("w2", "b2"))):
            params[name].data[...] = 0.0
    return params


def test_encoder_block_residual_identity_when_branches_are_zero():
    cfg = SMALL
    params = zeroed_block_params(cfg, 11, ["encoder.0"])
    x = Tensor(new_rng(12).uniform(-1, 1, size=(8, cfg.embed_dim)).astype(np.float32))
    out = encoder_block(x, params, "encoder.0", cfg.heads)
    np.testing.assert_array_equal(out.data, x.data)


def test_decoder_block_residual_identity_when_branches_are_zero():
    cfg = SMALL
    params = zeroed_block_params(cfg, 13, ["decoder.0"])
    gen = new_rng(14)
    x = Tensor(gen.uniform(-1, 1, size=(8, cfg.embed_dim)).astype(np.float32))
    enc = Tensor(gen.uniform(-1, 1, size=(8, cfg.embed_dim)).astype(np.float32))
    out = decoder_block(x, enc, params, "decoder.0", cfg.heads, cross=True)
    np.testing.assert_array_equal(out.data, x.data)


def test_decoder_cross_flag_controls_encoder_dependence():
    cfg = SMALL
    params = init_params(cfg, 15)
    gen = new_rng(16)
    x = Tensor(gen.uniform(-1, 1, size=(6, cfg.embed_dim)).astype(np.float32))
    enc_a = Tensor(gen.uniform(-1, 1, size=(6, cfg.embed_dim)).astype(np.float32))
    enc_b = Tensor(gen.uniform(-1, 1, size=(6, cfg.embed_dim)).astype(np.float32))

    off_a = decoder_block(x, enc_a, params, "decoder.0", cfg.heads, cross=False)
    off_b = decoder_block(x, enc_b, params, "decoder.0", cfg.heads, cross=False)
    np.testing.assert_array_equal(off_a.data, off_b.data)

    on_a = decoder_block(x, enc_a, params, "decoder.0", cfg.heads, cross=True)
    on_b = decoder_block(x, enc_b, params, "decoder.0", cfg.heads, cross=True)
    assert not np.array_equal(on_a.data, on_b.data)

    with pytest.raises(ValueError):
        decoder_block(x, Tensor(np.zeros((3, cfg.embed_dim), dtype=np.float32)),
                      params, "decoder.0", cfg.heads, cross=True)


def test_reshape_refine_folds_rows_before_convolving():
    # With 1x1 identity convs the head reduces to gelu applied tokenwise,
    # folded row i*W + j -> pixel (i, j).
    cfg = FusformerConfig(
        hsi_bands=6, msi_bands=2, embed_dim=6, heads=2, mlp_hidden=8, refine_kernel=1
    )
    f = cfg.embed_dim
    eye = np.eye(f, dtype=np.float32).reshape(1, 1, f, f)
    params = {
        "refine.conv1.w": Tensor(eye.copy()),
        "refine.conv1.b": Tensor(np.zeros(f, dtype=np.float32)),
        "refine.conv2.w": Tensor(eye.copy()),
        "refine.conv2.b": Tensor(np.zeros(cfg.hsi_bands, dtype=np.float32)),
    }
    tokens64 = new_rng(17).uniform(-2, 2, size=(6, f))
    out = reshape_refine(Tensor(tokens64, dtype=np.float64), 2, 3, params, cfg)
    want = fold_tokens(0.5 * tokens64 * (1.0 + erf(tokens64 / math.sqrt(2))), 2, 3)
    np.testing.assert_allclose(out.data, want, atol=1e-7)
    with pytest.raises(ValueError):
        reshape_refine(Tensor(tokens64, dtype=np.float64), 2, 4, params, cfg)


# ---------------------------------------------------------------------------
# full forward


def numpy_forward(up, msi, params, cfg, eps=1e-5):
    """Float64 replica of the whole network, written independently of the
    autograd primitives."""
    p = {k: v.data.astype(np.float64) for k, v in params.items()}
    h, w = up.shape[:2]
    x = np.concatenate([up, msi], axis=2).astype(np.float64).reshape(h * w, -1)

    def ln(x, prefix):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return p[f"{prefix}.gamma"] * (x - mu) / np.sqrt(var + eps) + p[f"{prefix}.beta"]

    def attn(xq, xkv, prefix):
        q = xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
        k = xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
        v = xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
        d = cfg.head_dim
        cols = []
        for i in range(cfg.heads):
            s = slice(i * d, (i + 1) * d)
            logits = q[:, s] @ k[:, s].T / math.sqrt(d)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            cols.append((e / e.sum(axis=1, keepdims=True)) @ v[:, s])
        return np.concatenate(cols, axis=1) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

    def g(x):
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2)))

    def mlp(x, prefix):
        return g(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    x = x @ p["embed.w"] + p["embed.b"]
    for i in range(cfg.encoder_depth):
        pre = f"encoder.{i}"
        n = ln(x, f"{pre}.ln1")
        x = x + attn(n, n, f"{pre}.attn")
        x = x + mlp(ln(x, f"{pre}.ln2"), f"{pre}.mlp")
    enc = x
    for i in range(cfg.decoder_depth):
        pre = f"decoder.{i}"
        n = ln(x, f"{pre}.ln1")
        x = x + attn(n, n, f"{pre}.attn1")
        n = ln(x, f"{pre}.ln2")
        x = x + attn(n, enc if cfg.decoder_cross else n, f"{pre}.attn2")
        x = x + mlp(ln(x, f"{pre}.ln3"), f"{pre}.mlp")

    grid = x.reshape(h, w, cfg.embed_dim)

    def conv(x, kw, kb):
        kh = kw.shape[0] // 2
        xp = np.pad(x, ((kh, kh), (kh, kh), (0, 0)))
        out = np.zeros((h, w, kw.shape[3]))
        for i in range(h):
            for j in range(w):
                patch = xp[i : i + kw.shape[0], j : j + kw.shape[1]]
                out[i, j] = np.tensordot(patch, kw, axes=3) + kb
        return out

    grid = g(conv(grid, p["refine.conv1.w"], p["refine.conv1.b"]))
    residual = conv(grid, p["refine.conv2.w"], p["refine.conv2.b"])
    return residual + up.astype(np.float64) if cfg.rls else residual


@pytest.mark.parametrize("cross", [True, False])
@pytest.mark.parametrize("rls", [True, False])
def test_forward_matches_numpy_replica(cross, rls):
    cfg = FusformerConfig(
        hsi_bands=4, msi_bands=2, embed_dim=6, heads=2, mlp_hidden=8,
        refine_kernel=3, decoder_cross=cross, rls=rls,
    )
    params = randomized_params(cfg, 20)
    up, msi = small_inputs(21, h=3, w=4, cfg=cfg)
    got = forward(up, msi, params, cfg).data
    want = numpy_forward(up, msi, params, cfg)
    assert got.dtype == np.float32 and got.shape == (3, 4, 4)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_forward_starts_at_identity_with_fresh_params():
    cfg = SMALL
    params = init_params(cfg, 22)
    up, msi = small_inputs(23)
    out = forward(up, msi, params, cfg)
    np.testing.assert_array_equal(out.data, up)

    no_rls = FusformerConfig(**{**cfg.to_dict(), "rls": False})
    out0 = forward(up, msi, init_params(no_rls, 22), no_rls)
    np.testing.assert_array_equal(out0.data, np.zeros_like(up))


def test_forward_determinism_bitwise():
    cfg = SMALL
    params = randomized_params(cfg, 24)
    up, msi = small_inputs(25)
    a = forward(up, msi, params, cfg).data
    b = forward(up, msi, params, cfg).data
    np.testing.assert_array_equal(a, b)


def test_forward_input_validation_and_stage_tags():
    cfg = SMALL
    params = init_params(cfg, 26)
    up, msi = small_inputs(27)
    with pytest.raises(ValueError, match="bands"):
        forward(up[:, :, :3], msi, params, cfg)
    with pytest.raises(ValueError, match="bands"):
        forward(up, msi[:, :, :1], params, cfg)

    broken = dict(params)
    broken["embed.w"] = Tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="^embed: "):
        forward(up, msi, broken, cfg)

    broken = dict(params)
    broken["encoder.0.attn.wq"] = Tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="^encoder: "):
        forward(up, msi, broken, cfg)


def test_predictor_matches_forward():
    cfg = SMALL
    params = randomized_params(cfg, 28)
    up, msi = small_inputs(29)
    fn = predictor(params, cfg)
    np.testing.assert_array_equal(fn(up, msi), forward(up, msi, params, cfg).data)
