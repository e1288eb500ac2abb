"""Training loop, checkpointing, and the residual-learning ablation harness.

Training is patch-based (full images would make attention quadratic in
H*W), driven by a single seeded generator that covers parameter init and
batch sampling, so a fixed seed gives a bit-identical loss trace. The
checkpoint carries parameters, Adam moments, the step counter, and the
packed generator state, which is what makes interrupted and uninterrupted
runs produce exactly the same trace.

Checkpoint file layout (little-endian): magic ``FUSFCKPT``; u32 version
(= 1); u32 config-JSON length + JSON; u32 tensor count, then per tensor
u32 name length, name bytes, u32 ndim, u32 dims..., float32 payload;
optimizer tensors in the same encoding; u64 step; 4 x u64 generator state.
Tensors are written in ascending name order so re-saving is byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    grad_array,
    mean_all,
    scale,
    sub,
    zero_grads,
)
from .data import FusionSample, atomic_write_bytes, extract_patches, tile_infer
from .metrics import QualityReport, report
from .model import FusformerConfig, forward, init_params, parameter_shapes, predictor
from .optim import AdamState, adam_init, adam_step
from .rng import from_state_words, new_rng, state_words

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FUSFCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    """Stored tensor names do not match what the config defines."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch: int = 8
    patch: int = 16
    ratio: int = 4
    sigma: float | None = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rls: bool = True
    decoder_cross: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {self.ratio}")
        if self.sigma is None:
            self.sigma = self.ratio / 2.0
        if self.patch < 1 or self.patch % self.ratio:
            raise ValueError(f"patch {self.patch} not divisible by ratio {self.ratio}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def split_config(d: dict) -> tuple[FusformerConfig, TrainConfig]:
    """Route one flat JSON config to the model and train dataclasses.

    rls and decoder_cross exist in both and are set in both; unknown keys
    are an error.
    """
    model_keys = {f.name for f in fields(FusformerConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - model_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = FusformerConfig(**{k: v for k, v in d.items() if k in model_keys})
    train_cfg = TrainConfig(**{k: v for k, v in d.items() if k in train_keys})
    return model_cfg, train_cfg


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference; subgradient 0 where entries tie."""
    return mean_all(absolute(sub(as_tensor(pred), as_tensor(target))))


# ---------------------------------------------------------------------------
# checkpoint persistence


@dataclass
class Checkpoint:
    model_cfg: FusformerConfig
    train_cfg: TrainConfig
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray]
    step: int
    rng_words: tuple[int, int, int, int]
    version: int = CKPT_VERSION


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"{self.label}: needed {n} bytes at offset {self.pos}, file ends at {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_tensors(r: _Reader) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        out[name] = np.ascontiguousarray(arr, dtype=np.float32)
    return out


def _config_json(model_cfg: FusformerConfig, train_cfg: TrainConfig) -> bytes:
    obj = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.version != CKPT_VERSION:
        raise CheckpointVersionError(f"can only write version {CKPT_VERSION}")
    cfg = _config_json(ckpt.model_cfg, ckpt.train_cfg)
    blob = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<I", CKPT_VERSION),
            struct.pack("<I", len(cfg)),
            cfg,
            _pack_tensors(ckpt.params),
            _pack_tensors(ckpt.opt),
            struct.pack("<Q", ckpt.step),
            struct.pack("<4Q", *ckpt.rng_words),
        ]
    )
    atomic_write_bytes(path, blob)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CKPT_VERSION}")
    cfg_obj = json.loads(r.take(r.u32()).decode())
    model_cfg = FusformerConfig.from_dict(cfg_obj["model"])
    train_cfg = TrainConfig.from_dict(cfg_obj["train"])
    params = _unpack_tensors(r)
    opt = _unpack_tensors(r)
    step = r.u64()
    words = tuple(r.u64() for _ in range(4))
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")

    expected = {name: shape for name, shape, _ in parameter_shapes(model_cfg)}
    if set(params) != set(expected):
        raise CheckpointNameError(
            f"{path}: stored parameter names do not match the config "
            f"(missing {sorted(set(expected) - set(params))}, "
            f"extra {sorted(set(params) - set(expected))})"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointNameError(f"{path}: {name} has shape {params[name].shape}, config wants {shape}")
    want_opt = {p + name for name in expected for p in ("adam_m.", "adam_v.")}
    if set(opt) != want_opt:
        raise CheckpointNameError(f"{path}: optimizer tensor names do not match the parameters")
    return Checkpoint(model_cfg, train_cfg, params, opt, step, words)


def _snapshot(model_cfg, train_cfg, params, adam: AdamState, gen) -> Checkpoint:
    return Checkpoint(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        params={n: t.data.copy() for n, t in params.items()},
        opt={
            **{"adam_m." + n: v.copy() for n, v in adam.m.items()},
            **{"adam_v." + n: v.copy() for n, v in adam.v.items()},
        },
        step=adam.step,
        rng_words=state_words(gen),
    )


# ---------------------------------------------------------------------------
# training loop


def train(
    cfg: TrainConfig,
    samples: list[FusionSample],
    model_cfg: FusformerConfig | None = None,
    resume: Checkpoint | None = None,
    checkpoint_path=None,
) -> tuple[dict[str, Tensor], list[float]]:
    """Run (or continue) training; returns parameters and the loss trace.

    The trace holds one loss per executed step, so a resumed run returns
    only its own segment. When checkpoint_path is given, a checkpoint is
    written at the start, every log_every steps, and at the end; on a
    non-finite loss the loop aborts and the last finite checkpoint stays
    on disk.
    """
    if not samples:
        raise ValueError("no training samples")
    patches: list[FusionSample] = []
    for s in samples:
        if s.gt is None:
            raise ValueError("training samples need ground truth")
        patches.extend(extract_patches(s, cfg.patch, cfg.patch))

    if resume is not None:
        model_cfg = resume.model_cfg
        params = {n: Tensor(a.copy(), requires_grad=True) for n, a in resume.params.items()}
        adam = adam_init(params)
        adam.step = resume.step
        for n in params:
            adam.m[n] = resume.opt["adam_m." + n].copy()
            adam.v[n] = resume.opt["adam_v." + n].copy()
        gen = from_state_words(resume.rng_words)
        start = resume.step
    else:
        if model_cfg is None:
            model_cfg = FusformerConfig(rls=cfg.rls, decoder_cross=cfg.decoder_cross)
        gen = new_rng(cfg.seed)
        params = init_params(model_cfg, gen)
        adam = adam_init(params)
        start = 0

    for s in samples:
        if s.lr.shape[2] != model_cfg.hsi_bands or s.msi.shape[2] != model_cfg.msi_bands:
            raise ValueError(
                f"sample bands ({s.lr.shape[2]}, {s.msi.shape[2]}) do not match "
                f"config ({model_cfg.hsi_bands}, {model_cfg.msi_bands})"
            )

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, _snapshot(model_cfg, cfg, params, adam, gen))

    trace: list[float] = []
    for step in range(start + 1, cfg.steps + 1):
        idx = gen.integers(0, len(patches), size=cfg.batch, dtype=np.int64)
        with Tape() as tape:
            total = None
            for i in idx:
                p = patches[int(i)]
                pred = forward(p.up, p.msi, params, model_cfg)
                term = l1_loss(pred, p.gt)
                total = term if total is None else add(total, term)
            loss = scale(total, 1.0 / cfg.batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(tape, loss)
        grads = {n: grad_array(t) for n, t in params.items()}
        adam_step(params, grads, adam, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        zero_grads(params.values())
        trace.append(value)
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.info("step %d/%d loss %.6f", step, cfg.steps, value)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, _snapshot(model_cfg, cfg, params, adam, gen))
    return params, trace


# ---------------------------------------------------------------------------
# residual-learning ablation


@dataclass
class AblationResult:
    rls_on: QualityReport
    rls_off: QualityReport
    baseline: QualityReport
    trace_on: list[float]
    trace_off: list[float]


def ablate_rls(
    cfg: TrainConfig,
    samples: list[FusionSample],
    holdout: FusionSample,
    model_cfg: FusformerConfig | None = None,
    tile: int = 32,
    overlap: int = 8,
    ckpt_on=None,
    ckpt_off=None,
) -> AblationResult:
    """Train twice (residual learning on and off, all else identical) and
    evaluate both on the held-out sample, next to the plain upsampling
    baseline."""
    if holdout.gt is None:
        raise ValueError("holdout sample needs ground truth")
    if model_cfg is None:
        model_cfg = FusformerConfig(decoder_cross=cfg.decoder_cross)
    reports = {}
    traces = {}
    for flag, path in ((True, ckpt_on), (False, ckpt_off)):
        arm_cfg = replace(cfg, rls=flag)
        arm_model = replace(model_cfg, rls=flag)
        log.info("ablation arm rls=%s", flag)
        params, trace = train(arm_cfg, samples, model_cfg=arm_model, checkpoint_path=path)
        pred = tile_infer(predictor(params, arm_model), holdout, tile, overlap)
        reports[flag] = report(pred, holdout.gt, holdout.ratio)
        traces[flag] = trace
    baseline = report(holdout.up, holdout.gt, holdout.ratio)
    return AblationResult(
        rls_on=reports[True],
        rls_off=reports[False],
        baseline=baseline,
        trace_on=traces[True],
        trace_off=traces[False],
    )
