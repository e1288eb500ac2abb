"""Transformer fusion network over pixel tokens.

The network sharpens an upsampled low-res hyperspectral cube using a
co-registered high-res multispectral image. Every pixel becomes one token
(its stacked HSI + MSI spectrum), tokens are embedded to width F and pushed
through a pre-norm transformer encoder and decoder, and a small
convolutional head folds the tokens back to a residual cube E. With
residual learning enabled the output is ``up + E``; the final conv layer is
zero-initialized so training starts exactly at the bicubic baseline.

Parameters live in a flat ``dict[str, Tensor]`` keyed by hierarchical names
("embed.w", "encoder.0.attn.wq", "refine.conv2.b", ...). The single source
of truth for names, shapes, and init rules is `parameter_shapes`; counting,
initialization, and checkpoint validation all derive from it.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np

from .autograd import (
    Tensor,
    add,
    concat_cols,
    conv2d_same,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)
from .rng import new_rng


@dataclass
class FusformerConfig:
    hsi_bands: int = 31
    msi_bands: int = 3
    embed_dim: int = 48
    heads: int = 6
    encoder_depth: int = 1
    decoder_depth: int = 1
    mlp_hidden: int = 192
    refine_kernel: int = 3
    decoder_cross: bool = True
    rls: bool = True

    def __post_init__(self):
        if self.hsi_bands < 1 or self.msi_bands < 1:
            raise ValueError("band counts must be positive")
        if self.embed_dim < 1 or self.heads < 1:
            raise ValueError("embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder_depth and decoder_depth must be >= 1")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be positive")
        if self.refine_kernel < 1 or self.refine_kernel % 2 == 0:
            raise ValueError(f"refine_kernel must be odd, got {self.refine_kernel}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FusformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _attention_shapes(prefix: str, f: int):
    out = []
    for part in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{part}", (f, f), "uniform"))
        out.append((f"{prefix}.b{part}", (f,), "zeros"))
    return out


def _ln_shapes(prefix: str, f: int):
    return [(f"{prefix}.gamma", (f,), "ones"), (f"{prefix}.beta", (f,), "zeros")]


def _mlp_shapes(prefix: str, f: int, hidden: int):
    return [
        (f"{prefix}.w1", (f, hidden), "uniform"),
        (f"{prefix}.b1", (hidden,), "zeros"),
        (f"{prefix}.w2", (hidden, f), "uniform"),
        (f"{prefix}.b2", (f,), "zeros"),
    ]


def parameter_shapes(cfg: FusformerConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) triples; init is uniform | zeros | ones.

    The order fixes the random draw sequence of `init_params`, so it must
    stay stable across releases for seeds to stay reproducible.
    """
    f, k = cfg.embed_dim, cfg.refine_kernel
    shapes: list[tuple[str, tuple[int, ...], str]] = [
        ("embed.w", (cfg.hsi_bands + cfg.msi_bands, f), "uniform"),
        ("embed.b", (f,), "zeros"),
    ]
    for i in range(cfg.encoder_depth):
        p = f"encoder.{i}"
        shapes += _ln_shapes(f"{p}.ln1", f)
        shapes += _attention_shapes(f"{p}.attn", f)
        shapes += _ln_shapes(f"{p}.ln2", f)
        shapes += _mlp_shapes(f"{p}.mlp", f, cfg.mlp_hidden)
    for i in range(cfg.decoder_depth):
        p = f"decoder.{i}"
        shapes += _ln_shapes(f"{p}.ln1", f)
        shapes += _attention_shapes(f"{p}.attn1", f)
        shapes += _ln_shapes(f"{p}.ln2", f)
        shapes += _attention_shapes(f"{p}.attn2", f)
        shapes += _ln_shapes(f"{p}.ln3", f)
        shapes += _mlp_shapes(f"{p}.mlp", f, cfg.mlp_hidden)
    shapes += [
        ("refine.conv1.w", (k, k, f, f), "uniform"),
        ("refine.conv1.b", (f,), "zeros"),
        # zero-initialized on purpose: the network starts at output == up
        ("refine.conv2.w", (k, k, f, cfg.hsi_bands), "zero_final"),
        ("refine.conv2.b", (cfg.hsi_bands,), "zero_final"),
    ]
    return shapes


def param_count(cfg: FusformerConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_shapes(cfg))


def init_params(cfg: FusformerConfig, rng) -> dict[str, Tensor]:
    """Fresh trainable parameters; rng is a seed int or a numpy Generator.

    Weights are uniform in +-sqrt(1/fan_in) (fan_in = product of all but the
    last axis), biases zero, layer-norm scales one, and the final refine
    conv exactly zero.
    """
    gen = new_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_shapes(cfg):
        if kind == "uniform":
            bound = math.sqrt(1.0 / np.prod(shape[:-1]))
            data = gen.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind == "ones":
            data = np.ones(shape, dtype=np.float32)
        else:  # zeros, zero_final
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def validate_params(params: dict[str, Tensor], cfg: FusformerConfig) -> None:
    expected = {name: shape for name, shape, _ in parameter_shapes(cfg)}
    got = {name: tuple(t.shape) for name, t in params.items()}
    if set(got) != set(expected):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
    for name, shape in expected.items():
        if got[name] != shape:
            raise ValueError(f"{name}: shape {got[name]}, config wants {shape}")


# ---------------------------------------------------------------------------
# token layout


def pixel_tokenize(up: np.ndarray, msi: np.ndarray) -> np.ndarray:
    """Stack each pixel's HSI then MSI spectrum into row i*W + j."""
    up = np.asarray(up, dtype=np.float32)
    msi = np.asarray(msi, dtype=np.float32)
    if up.ndim != 3 or msi.ndim != 3:
        raise ValueError("inputs must be (H, W, C) cubes")
    if up.shape[:2] != msi.shape[:2]:
        raise ValueError(f"spatial mismatch: {up.shape[:2]} vs {msi.shape[:2]}")
    h, w = up.shape[:2]
    stacked = np.concatenate([up, msi], axis=2)
    return stacked.reshape(h * w, up.shape[2] + msi.shape[2])


def fold_tokens(tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of the layout contract: row i*W + j back to pixel (i, j)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != height * width:
        raise ValueError(f"expected ({height * width}, C) tokens, got {tokens.shape}")
    return tokens.reshape(height, width, tokens.shape[1])


# ---------------------------------------------------------------------------
# network stages


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def multi_head_attention(
    xq: Tensor, xkv: Tensor, params, prefix: str, heads: int
) -> Tensor:
    """Scaled dot-product attention over token rows, split into head groups.

    Per head: softmax_rows(Q K^T / sqrt(d_k)) V on column slices of width
    d_k; the concatenated heads pass through the output projection w_o.
    """
    f = xq.shape[1]
    if xkv.shape[1] != f:
        raise ValueError(f"query width {f} != key/value width {xkv.shape[1]}")
    if f % heads:
        raise ValueError(f"width {f} not divisible by {heads} heads")
    d = f // heads
    q = linear(xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(xkv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(xkv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    outs = []
    for i in range(heads):
        lo, hi = i * d, (i + 1) * d
        qi, ki, vi = (slice_cols(t, lo, hi) for t in (q, k, v))
        logits = scale(matmul(qi, transpose(ki)), 1.0 / math.sqrt(d))
        outs.append(matmul(softmax_rows(logits), vi))
    merged = outs[0] if heads == 1 else concat_cols(outs)
    return linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _mlp(x: Tensor, params, prefix: str) -> Tensor:
    hidden = gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encoder_block(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-norm block: x += self-attention(LN(x)); x += MLP(LN(x))."""
    normed = _ln(x, params, f"{prefix}.ln1")
    x = add(x, multi_head_attention(normed, normed, params, f"{prefix}.attn", heads))
    return add(x, _mlp(_ln(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp"))


def decoder_block(
    x: Tensor, enc_out: Tensor, params, prefix: str, heads: int, cross: bool
) -> Tensor:
    """Self-attention, then encoder attention (or a second self-attention
    when cross is off), then MLP, each pre-normed inside its residual."""
    if enc_out.shape != x.shape:
        raise ValueError(f"encoder output {enc_out.shape} != decoder input {x.shape}")
    normed = _ln(x, params, f"{prefix}.ln1")
    x = add(x, multi_head_attention(normed, normed, params, f"{prefix}.attn1", heads))
    normed = _ln(x, params, f"{prefix}.ln2")
    kv = enc_out if cross else normed
    x = add(x, multi_head_attention(normed, kv, params, f"{prefix}.attn2", heads))
    return add(x, _mlp(_ln(x, params, f"{prefix}.ln3"), params, f"{prefix}.mlp"))


def reshape_refine(
    tokens: Tensor, height: int, width: int, params, cfg: FusformerConfig
) -> Tensor:
    """Fold tokens to an (H, W, F) grid and refine to the residual cube."""
    if tokens.shape[0] != height * width:
        raise ValueError(
            f"{tokens.shape[0]} tokens cannot fold to {height}x{width}"
        )
    grid = reshape(tokens, (height, width, cfg.embed_dim))
    grid = gelu(conv2d_same(grid, params["refine.conv1.w"], params["refine.conv1.b"]))
    return conv2d_same(grid, params["refine.conv2.w"], params["refine.conv2.b"])


@contextmanager
def _stage(name: str):
    try:
        yield
    except ValueError as err:
        raise type(err)(f"{name}: {err}") from err


def forward(
    up: np.ndarray, msi: np.ndarray, params: dict[str, Tensor], cfg: FusformerConfig
) -> Tensor:
    """Full network: returns up + residual when cfg.rls, else the residual."""
    up = np.asarray(up, dtype=np.float32)
    msi = np.asarray(msi, dtype=np.float32)
    if up.ndim != 3 or up.shape[2] != cfg.hsi_bands:
        raise ValueError(f"up shape {up.shape} does not carry {cfg.hsi_bands} bands")
    if msi.ndim != 3 or msi.shape[2] != cfg.msi_bands:
        raise ValueError(f"msi shape {msi.shape} does not carry {cfg.msi_bands} bands")
    h, w = up.shape[:2]
    with _stage("tokenize"):
        tokens = Tensor(pixel_tokenize(up, msi))
    with _stage("embed"):
        x = linear(tokens, params["embed.w"], params["embed.b"])
    with _stage("encoder"):
        for i in range(cfg.encoder_depth):
            x = encoder_block(x, params, f"encoder.{i}", cfg.heads)
    enc_out = x
    with _stage("decoder"):
        for i in range(cfg.decoder_depth):
            x = decoder_block(
                x, enc_out, params, f"decoder.{i}", cfg.heads, cfg.decoder_cross
            )
    with _stage("refine"):
        residual = reshape_refine(x, h, w, params, cfg)
    if cfg.rls:
        return add(residual, Tensor(up))
    return residual


def predictor(params: dict[str, Tensor], cfg: FusformerConfig):
    """Closure mapping (up, msi) arrays to a fused cube array (no grads)."""

    def fn(up: np.ndarray, msi: np.ndarray) -> np.ndarray:
        return forward(up, msi, params, cfg).data

    return fn
