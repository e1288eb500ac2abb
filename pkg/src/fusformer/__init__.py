"""Hyperspectral/multispectral image fusion with a pixel-token transformer.

The package is self-contained on numpy: a small tape-based autodiff engine
(`autograd`), the fusion network (`model`), Wald-style degradation and cube
I/O (`data`), quality metrics (`metrics`), the training loop with exact
checkpoint resume (`train`), verification suites (`checks`), and a batch
command line (`cli`, installed as ``fusformer``).
"""

from .autograd import Tape, Tensor, backward
from .data import (
    FusionSample,
    default_srf,
    extract_patches,
    gaussian_blur,
    read_cube,
    simulate,
    synth_cube,
    tile_infer,
    upsample_bicubic,
    write_cube,
)
from .metrics import QualityReport, ergas, psnr, report, sam, ssim
from .model import FusformerConfig, forward, init_params, param_count, predictor
from .train import (
    Checkpoint,
    TrainConfig,
    ablate_rls,
    l1_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "FusionSample",
    "default_srf",
    "extract_patches",
    "gaussian_blur",
    "read_cube",
    "simulate",
    "synth_cube",
    "tile_infer",
    "upsample_bicubic",
    "write_cube",
    "QualityReport",
    "ergas",
    "psnr",
    "report",
    "sam",
    "ssim",
    "FusformerConfig",
    "forward",
    "init_params",
    "param_count",
    "predictor",
    "Checkpoint",
    "TrainConfig",
    "ablate_rls",
    "l1_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
