"""Self-contained verification suites: gradient checks against central
finite differences, token permutation equivariance, and slow reference
oracles (loop-based attention, metric closed forms, residual identity).

Each suite returns CheckResult records; the command line runs them via
``check`` and the test suite asserts on the same records, so there is one
implementation of every invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .autograd import Tape, Tensor, backward, gelu, grad_array, linear, mean_all, zero_grads
from .model import (
    FusformerConfig,
    decoder_block,
    encoder_block,
    forward,
    init_params,
    multi_head_attention,
)
from .rng import new_rng


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# gradient suite

_GROUPS = ("embed", "attention", "layer_norm", "mlp", "refine")


def _group_of(name: str) -> str:
    if name.startswith("embed."):
        return "embed"
    if ".attn" in name:
        return "attention"
    if ".ln" in name:
        return "layer_norm"
    if ".mlp." in name:
        return "mlp"
    return "refine"


def _live_params(cfg: FusformerConfig, gen, dtype) -> dict[str, Tensor]:
    """Init params with the final conv randomized, so gradients reach every
    layer (the zero-initialized final conv blocks upstream flow at init)."""
    params = init_params(cfg, gen)
    for name in ("refine.conv2.w", "refine.conv2.b"):
        shape = params[name].shape
        params[name] = Tensor(
            gen.uniform(-0.05, 0.05, size=shape).astype(np.float32), requires_grad=True
        )
    if dtype == np.float64:
        params = {
            n: Tensor(t.data.astype(np.float64), requires_grad=True)
            for n, t in params.items()
        }
    return params


def gradient_suite(seed: int = 0, coords_per_group: int = 11) -> list[CheckResult]:
    """Compare reverse-mode gradients with central finite differences on a
    4x4 patch of the default model, at both precisions.

    The scalar head is mean(gelu(output)): smooth everywhere, so the finite
    difference is a valid oracle at every coordinate. Relative error uses
    max(|ad|, |fd|, 1) in the denominator, turning into absolute error for
    near-zero gradients.
    """
    cfg = FusformerConfig()
    gen = new_rng(seed)
    up = gen.uniform(0.0, 1.0, size=(4, 4, cfg.hsi_bands)).astype(np.float32)
    msi = gen.uniform(0.0, 1.0, size=(4, 4, cfg.msi_bands)).astype(np.float32)

    results = []
    for dtype, step, tol in ((np.float32, 1e-3, 1e-3), (np.float64, 1e-5, 1e-6)):
        params = _live_params(cfg, new_rng(seed + 1), dtype)

        def loss_value() -> float:
            return float(mean_all(gelu(forward(up, msi, params, cfg))).data)

        with Tape() as tape:
            loss = mean_all(gelu(forward(up, msi, params, cfg)))
        backward(tape, loss)
        grads = {n: grad_array(t).copy() for n, t in params.items()}
        zero_grads(params.values())

        by_group: dict[str, list[str]] = {g: [] for g in _GROUPS}
        for name in sorted(params):
            by_group[_group_of(name)].append(name)

        pick = new_rng(seed + 2)
        for group in _GROUPS:
            worst = 0.0
            worst_at = ""
            for _ in range(coords_per_group):
                name = by_group[group][int(pick.integers(0, len(by_group[group])))]
                flat = params[name].data.reshape(-1)
                i = int(pick.integers(0, flat.size))
                old = flat[i].copy()
                hi = (old + np.asarray(step)).astype(dtype)
                lo = (old - np.asarray(step)).astype(dtype)
                flat[i] = hi
                lp = loss_value()
                flat[i] = lo
                lm = loss_value()
                flat[i] = old
                fd = (lp - lm) / (float(hi) - float(lo))
                ad = float(grads[name].reshape(-1)[i])
                rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
                if rel > worst:
                    worst, worst_at = rel, f"{name}[{i}]"
            results.append(
                CheckResult(
                    name=f"grad/{np.dtype(dtype).name}/{group}",
                    ok=worst <= tol,
                    detail=f"{coords_per_group} coords, max rel err {worst:.3e}"
                    f" at {worst_at} (tol {tol:g})",
                )
            )
    return results


# ---------------------------------------------------------------------------
# permutation equivariance suite


def _token_path(tokens: np.ndarray, params, cfg: FusformerConfig) -> np.ndarray:
    """Embedding + encoder + decoder on raw tokens (no spatial folding)."""
    x = linear(Tensor(tokens), params["embed.w"], params["embed.b"])
    for i in range(cfg.encoder_depth):
        x = encoder_block(x, params, f"encoder.{i}", cfg.heads)
    enc = x
    for i in range(cfg.decoder_depth):
        x = decoder_block(x, enc, params, f"decoder.{i}", cfg.heads, cfg.decoder_cross)
    return x.data


def permutation_suite(seed: int = 0, n_tokens: int = 16, tol: float = 1e-5) -> list[CheckResult]:
    """The token path has no positional terms, so permuting input rows must
    permute output rows and nothing else (up to float reassociation)."""
    cfg = FusformerConfig()
    gen = new_rng(seed)
    params = init_params(cfg, gen)
    for name in ("refine.conv2.w", "refine.conv2.b"):
        params[name] = Tensor(
            gen.uniform(-0.05, 0.05, size=params[name].shape).astype(np.float32)
        )
    tokens = gen.uniform(0.0, 1.0, size=(n_tokens, cfg.hsi_bands + cfg.msi_bands)).astype(
        np.float32
    )
    perm = np.argsort(gen.uniform(size=n_tokens))
    base = _token_path(tokens, params, cfg)
    permuted = _token_path(tokens[perm], params, cfg)
    diff = float(np.abs(permuted - base[perm]).max())
    return [
        CheckResult(
            name=f"perm/{n_tokens}-tokens",
            ok=diff <= tol,
            detail=f"max abs diff {diff:.3e} (tol {tol:g})",
        )
    ]


# ---------------------------------------------------------------------------
# oracle suite


def attention_oracle(
    xq: np.ndarray, xkv: np.ndarray, weights: dict[str, np.ndarray], heads: int
) -> np.ndarray:
    """Slow per-head, per-row attention in float64 for cross-checking."""
    xq = np.asarray(xq, dtype=np.float64)
    xkv = np.asarray(xkv, dtype=np.float64)
    f = xq.shape[1]
    d = f // heads
    q = xq @ weights["wq"] + weights["bq"]
    k = xkv @ weights["wk"] + weights["bk"]
    v = xkv @ weights["wv"] + weights["bv"]
    merged = np.zeros((xq.shape[0], f))
    for h in range(heads):
        qs, ks, vs = (m[:, h * d : (h + 1) * d] for m in (q, k, v))
        for i in range(xq.shape[0]):
            logits = np.array([qs[i] @ ks[j] for j in range(xkv.shape[0])]) / math.sqrt(d)
            e = np.exp(logits - logits.max())
            w = e / e.sum()
            merged[i, h * d : (h + 1) * d] = sum(w[j] * vs[j] for j in range(xkv.shape[0]))
    return merged @ weights["wo"] + weights["bo"]


def _attention_case(n: int, f: int, heads: int, gen, tol: float) -> CheckResult:
    xq = gen.uniform(-1.0, 1.0, size=(n, f))
    xkv = gen.uniform(-1.0, 1.0, size=(n, f))
    raw = {}
    params = {}
    for part in ("q", "k", "v", "o"):
        w = gen.uniform(-0.5, 0.5, size=(f, f))
        b = gen.uniform(-0.1, 0.1, size=f)
        raw["w" + part], raw["b" + part] = w, b
        params[f"a.w{part}"] = Tensor(w)
        params[f"a.b{part}"] = Tensor(b)
    got = multi_head_attention(Tensor(xq), Tensor(xkv), params, "a", heads).data
    want = attention_oracle(xq, xkv, raw, heads)
    diff = float(np.abs(got - want).max())
    return CheckResult(
        name=f"oracle/attention/n{n}-f{f}-h{heads}",
        ok=diff <= tol,
        detail=f"max abs diff {diff:.3e} (tol {tol:g})",
    )


def _attention_hand_case(tol: float = 1e-3) -> CheckResult:
    """n=2, F=2, one head, identity projections: row 0 of the output is the
    softmax of [1/sqrt(2), 0], about [0.670, 0.330]."""
    eye = np.eye(2)
    zero = np.zeros(2)
    params = {}
    for part in ("q", "k", "v", "o"):
        params[f"a.w{part}"] = Tensor(eye)
        params[f"a.b{part}"] = Tensor(zero)
    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    got = multi_head_attention(x, x, params, "a", 1).data
    expect = np.array([0.670, 0.330])
    diff = float(np.abs(got[0] - expect).max())
    p = math.exp(1.0 / math.sqrt(2.0))
    exact = np.array([p, 1.0]) / (p + 1.0)
    exact_diff = float(np.abs(got[0] - exact).max())
    return CheckResult(
        name="oracle/attention/hand-case",
        ok=diff <= tol and exact_diff <= 1e-9,
        detail=f"row 0 {got[0].round(6).tolist()}, vs [0.670, 0.330] diff {diff:.1e},"
        f" vs closed form diff {exact_diff:.1e}",
    )


def _metric_cases(tol: float = 1e-6) -> list[CheckResult]:
    out = []
    shape = (16, 16, 2)

    gt = np.zeros(shape)
    x = np.full(shape, 0.1)
    v = metrics.psnr(x, gt)
    out.append(
        CheckResult("oracle/metrics/psnr-20dB", abs(v - 20.0) <= tol, f"{v!r} vs 20")
    )

    gen = new_rng(3)
    base = gen.uniform(0.1, 1.0, size=shape)
    v = metrics.sam(2.0 * base, base)
    out.append(CheckResult("oracle/metrics/sam-0deg", abs(v) <= tol, f"{v!r} vs 0"))
    a = np.zeros(shape)
    b = np.zeros(shape)
    a[:, :, 0] = 1.0
    b[:, :, 1] = 1.0
    v = metrics.sam(a, b)
    out.append(
        CheckResult("oracle/metrics/sam-90deg", abs(v - 90.0) <= tol, f"{v!r} vs 90")
    )

    gt = np.full((16, 16, 1), 0.5)
    x = np.full((16, 16, 1), 0.55)
    v = metrics.ergas(x, gt, 4)
    out.append(
        CheckResult("oracle/metrics/ergas-2.5", abs(v - 2.5) <= tol, f"{v!r} vs 2.5")
    )

    a_val, b_val = 0.5, 0.25
    c1 = (metrics.SSIM_K1) ** 2
    want = (2.0 * a_val * b_val + c1) / (a_val * a_val + b_val * b_val + c1)
    v = metrics.ssim(np.full(shape, a_val), np.full(shape, b_val))
    out.append(
        CheckResult(
            "oracle/metrics/ssim-constant", abs(v - want) <= tol, f"{v!r} vs {want!r}"
        )
    )
    return out


def _residual_identity_case(seed: int = 0, trials: int = 10) -> CheckResult:
    cfg = FusformerConfig()
    gen = new_rng(seed)
    params = init_params(cfg, gen)
    exact = 0
    for _ in range(trials):
        h = int(gen.integers(4, 9))
        w = int(gen.integers(4, 9))
        up = gen.uniform(0.0, 1.0, size=(h, w, cfg.hsi_bands)).astype(np.float32)
        msi = gen.uniform(0.0, 1.0, size=(h, w, cfg.msi_bands)).astype(np.float32)
        out = forward(up, msi, params, cfg)
        if np.array_equal(out.data, up):
            exact += 1
    return CheckResult(
        name="oracle/residual-identity",
        ok=exact == trials,
        detail=f"{exact}/{trials} inputs reproduced bit-exactly at init",
    )


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    gen = new_rng(seed + 10)
    results = [
        _attention_case(2, 2, 1, gen, 1e-6),
        _attention_case(4, 48, 6, gen, 1e-6),
        _attention_case(9, 48, 8, gen, 1e-6),
        _attention_hand_case(),
    ]
    results.extend(_metric_cases())
    results.append(_residual_identity_case(seed))
    return results


_SUITES = {
    "grad": gradient_suite,
    "perm": permutation_suite,
    "oracle": oracle_suite,
}


def run_suites(names) -> tuple[bool, list[CheckResult]]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(_SUITES[name]())
    return all(r.ok for r in results), results
