"""Command-line surface: simulate fusion inputs, train, infer, evaluate,
inspect the parameter budget, run the verification suites, and run the
residual-learning ablation.

Conventions shared by every subcommand: diagnostics go to stderr, data goes
to files (written atomically), and a run manifest JSON recording the
resolved configuration lands beside each command's outputs. Exit codes:
0 success, 1 operational error (bad file, divergence, undefined metric),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checks
from .autograd import ShapeError, Tensor
from .data import (
    CubeFileError,
    FusionSample,
    atomic_write_bytes,
    default_srf,
    load_srf,
    read_cube,
    simulate,
    synth_cube,
    tile_infer,
    upsample_bicubic,
    write_cube,
    write_pgm,
)
from .metrics import QualityReport, report, report_to_json
from .model import FusformerConfig, param_count, predictor
from .train import (
    TrainConfig,
    TrainingDiverged,
    ablate_rls,
    load_checkpoint,
    split_config,
    train,
)

log = logging.getLogger(__name__)

SAMPLE_FILES = ("gt.hsc", "lr.hsc", "msi.hsc", "up.hsc")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    wall_time_s: float


def write_manifest(path, manifest: RunManifest) -> None:
    atomic_write_bytes(path, (json.dumps(asdict(manifest), indent=2) + "\n").encode())


def _load_config(path) -> tuple[FusformerConfig, TrainConfig]:
    if path is None:
        return FusformerConfig(), TrainConfig()
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return split_config(obj)


def _parse_gt(spec: str) -> tuple[np.ndarray, int | None]:
    """Either a cube path or synth:seed,H,W,S. Returns (cube, seed-or-None)."""
    if spec.startswith("synth:"):
        parts = spec[len("synth:") :].split(",")
        if len(parts) != 4:
            raise ValueError(f"synth spec {spec!r} needs synth:seed,H,W,S")
        seed, h, w, s = (int(p) for p in parts)
        return synth_cube(seed, h, w, s), seed
    return read_cube(spec), None


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    gt, seed = _parse_gt(args.gt)
    sigma = args.sigma if args.sigma is not None else args.ratio / 2.0
    if args.srf == "default3":
        srf = default_srf(gt.shape[2])
    else:
        srf = load_srf(args.srf)
    sample = simulate(gt, ratio=args.ratio, sigma=sigma, srf=srf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cubes = {"gt.hsc": sample.gt, "lr.hsc": sample.lr, "msi.hsc": sample.msi, "up.hsc": sample.up}
    for name, cube in cubes.items():
        write_cube(out / name, cube)
    write_manifest(
        out / "manifest.json",
        RunManifest(
            command="simulate",
            config={
                "gt": args.gt,
                "ratio": args.ratio,
                "sigma": sigma,
                "srf": args.srf,
                "srf_matrix": srf.tolist(),
            },
            inputs={} if seed is not None else {"gt": args.gt},
            outputs={n: str(out / n) for n in cubes},
            seed=seed,
            wall_time_s=time.perf_counter() - t0,
        ),
    )
    log.info("wrote %s (gt %s, lr %s, msi %s)", out, gt.shape, sample.lr.shape, sample.msi.shape)
    return 0


def load_sample_dir(path) -> FusionSample:
    """Read one simulate output directory back into a fusion sample."""
    d = Path(path)
    missing = [n for n in SAMPLE_FILES if not (d / n).is_file()]
    if missing:
        raise ValueError(f"{d}: missing {', '.join(missing)}")
    gt, lr, msi, up = (read_cube(d / n) for n in SAMPLE_FILES)
    if msi.shape[0] % lr.shape[0] or msi.shape[1] % lr.shape[1]:
        raise ValueError(f"{d}: msi {msi.shape} not an integer multiple of lr {lr.shape}")
    ratio = msi.shape[0] // lr.shape[0]
    return FusionSample(gt=gt, lr=lr, msi=msi, up=up, ratio=ratio)


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    model_cfg, train_cfg = _load_config(args.config)
    dirs = [d for d in args.data.split(",") if d]
    samples = [load_sample_dir(d) for d in dirs]
    resume = load_checkpoint(args.resume) if args.resume else None
    _, trace = train(
        train_cfg, samples, model_cfg=model_cfg, resume=resume, checkpoint_path=args.out
    )
    write_manifest(
        str(args.out) + ".manifest.json",
        RunManifest(
            command="train",
            config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
            inputs={"data": dirs, "resume": args.resume},
            outputs={"checkpoint": str(args.out)},
            seed=train_cfg.seed,
            wall_time_s=time.perf_counter() - t0,
        ),
    )
    if trace:
        log.info("final loss %.6f after %d steps", trace[-1], len(trace))
    return 0


def _cmd_infer(args) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.ckpt)
    lr = read_cube(args.lr)
    msi = read_cube(args.msi)
    if msi.shape[0] % lr.shape[0] or msi.shape[1] % lr.shape[1]:
        raise ValueError(f"msi {msi.shape} not an integer multiple of lr {lr.shape}")
    ratio = msi.shape[0] // lr.shape[0]
    if msi.shape[1] // lr.shape[1] != ratio:
        raise ValueError(f"anisotropic ratio: {msi.shape} vs {lr.shape}")
    up = upsample_bicubic(lr, ratio)
    sample = FusionSample(gt=None, lr=lr, msi=msi, up=up, ratio=ratio)
    params = {n: Tensor(a) for n, a in ckpt.params.items()}
    fused = tile_infer(predictor(params, ckpt.model_cfg), sample, args.tile, args.overlap)
    write_cube(args.out, fused)
    write_manifest(
        str(args.out) + ".manifest.json",
        RunManifest(
            command="infer",
            config={
                "model": ckpt.model_cfg.to_dict(),
                "tile": args.tile,
                "overlap": args.overlap,
                "ratio": ratio,
            },
            inputs={"ckpt": str(args.ckpt), "lr": str(args.lr), "msi": str(args.msi)},
            outputs={"fused": str(args.out)},
            seed=None,
            wall_time_s=time.perf_counter() - t0,
        ),
    )
    log.info("wrote %s %s", args.out, fused.shape)
    return 0


def _report_dict(rep: QualityReport) -> dict:
    return json.loads(report_to_json(rep))


def _cmd_eval(args) -> int:
    t0 = time.perf_counter()
    pred = read_cube(args.pred)
    gt = read_cube(args.gt)
    rep = report(pred, gt, args.ratio)
    atomic_write_bytes(args.out, report_to_json(rep).encode())
    outputs = {"report": str(args.out)}
    if args.residual:
        rdir = Path(args.residual)
        rdir.mkdir(parents=True, exist_ok=True)
        err = np.abs(pred.astype(np.float64) - gt.astype(np.float64))
        write_cube(rdir / "residual.hsc", err.astype(np.float32))
        mean_err = err.mean(axis=2)
        top = mean_err.max()
        write_pgm(rdir / "residual.pgm", mean_err / top * 255.0 if top > 0 else mean_err)
        outputs["residual"] = str(rdir)
    write_manifest(
        str(args.out) + ".manifest.json",
        RunManifest(
            command="eval",
            config={"ratio": args.ratio},
            inputs={"pred": str(args.pred), "gt": str(args.gt)},
            outputs=outputs,
            seed=None,
            wall_time_s=time.perf_counter() - t0,
        ),
    )
    log.info("psnr %.4f sam %.4f ergas %.4f ssim %.6f", rep.psnr, rep.sam, rep.ergas, rep.ssim)
    return 0


def _cmd_params(args) -> int:
    model_cfg, _ = _load_config(args.config)
    print(param_count(model_cfg))
    return 0


def _cmd_check(args) -> int:
    names = [n for n in ("grad", "perm", "oracle") if getattr(args, n)]
    if args.all or not names:
        names = ["grad", "perm", "oracle"]
    ok, results = checks.run_suites(names)
    for r in results:
        print(r.line(), file=sys.stderr)
    print(f"{sum(r.ok for r in results)}/{len(results)} checks passed", file=sys.stderr)
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    model_cfg, train_cfg = _load_config(args.config)
    srf = default_srf(args.bands, model_cfg.msi_bands)
    data = simulate(
        synth_cube(args.data_seed, args.height, args.width, args.bands),
        ratio=train_cfg.ratio,
        sigma=train_cfg.sigma,
        srf=srf,
    )
    holdout = simulate(
        synth_cube(args.holdout_seed, args.height, args.width, args.bands),
        ratio=train_cfg.ratio,
        sigma=train_cfg.sigma,
        srf=srf,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = ablate_rls(
        train_cfg,
        [data],
        holdout,
        model_cfg=model_cfg,
        tile=args.tile,
        overlap=args.overlap,
        ckpt_on=out / "rls_on.ckpt",
        ckpt_off=out / "rls_off.ckpt",
    )
    summary = {
        "rls_on": _report_dict(result.rls_on),
        "rls_off": _report_dict(result.rls_off),
        "baseline": _report_dict(result.baseline),
        "trace_rls_on": result.trace_on,
        "trace_rls_off": result.trace_off,
    }
    atomic_write_bytes(out / "ablation.json", (json.dumps(summary, indent=2) + "\n").encode())
    write_manifest(
        out / "manifest.json",
        RunManifest(
            command="ablate",
            config={
                "model": model_cfg.to_dict(),
                "train": train_cfg.to_dict(),
                "data_seed": args.data_seed,
                "holdout_seed": args.holdout_seed,
                "height": args.height,
                "width": args.width,
                "bands": args.bands,
                "tile": args.tile,
                "overlap": args.overlap,
            },
            inputs={},
            outputs={
                "ablation": str(out / "ablation.json"),
                "rls_on": str(out / "rls_on.ckpt"),
                "rls_off": str(out / "rls_off.ckpt"),
            },
            seed=train_cfg.seed,
            wall_time_s=time.perf_counter() - t0,
        ),
    )
    log.info(
        "psnr: rls on %.4f, rls off %.4f, upsampling baseline %.4f",
        result.rls_on.psnr,
        result.rls_off.psnr,
        result.baseline.psnr,
    )
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusformer",
        description="Hyperspectral/multispectral fusion: simulation, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="degrade a ground-truth cube into fusion inputs")
    p.add_argument("--gt", required=True, help="HSC cube path or synth:seed,H,W,S")
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--sigma", type=float, default=None, help="blur sigma (default ratio/2)")
    p.add_argument("--srf", default="default3", help="CSV spectral response path or 'default3'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train", help="train on simulate output directories")
    p.add_argument("--data", required=True, help="comma-separated sample directories")
    p.add_argument("--config", default=None, help="JSON config (model + train keys)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="fuse a LR-HSI / HR-MSI pair with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True, help="low-res hyperspectral HSC")
    p.add_argument("--msi", required=True, help="high-res multispectral HSC")
    p.add_argument("--tile", type=int, default=32)
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--out", required=True, help="fused HSC path")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="quality report of a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ratio", type=int, required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--residual", default=None, help="directory for residual map dumps")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("params", help="print the trainable parameter count")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_params)

    p = sub.add_parser("check", help="run the verification suites")
    p.add_argument("--grad", action="store_true")
    p.add_argument("--perm", action="store_true")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--all", action="store_true")
    p.set_defaults(fn=_cmd_check)

    p = sub.add_parser("ablate", help="train with and without residual learning, compare")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--holdout-seed", type=int, default=8)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--tile", type=int, default=32)
    p.add_argument("--overlap", type=int, default=8)
    p.set_defaults(fn=_cmd_ablate)

    return parser


def run(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
        )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.fn(args)
    except (CubeFileError, TrainingDiverged, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
