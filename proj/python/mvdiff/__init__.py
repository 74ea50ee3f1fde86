"""Multi-view diffusion with cross-frame attention and projection layers."""

from ._core import (
    InvalidInput,
    UndefinedMetric,
    contract,
    count_parameters,
    default_config,
    detokenize,
    make_scene,
    make_schedule,
    masked_psnr,
    masked_ssim,
    project,
    read_scene,
    reprojection_consistency,
    ring_camera,
    sample,
    tokenize,
    uncontract,
    unproject_pixel,
    verify,
    vocabulary,
    write_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
