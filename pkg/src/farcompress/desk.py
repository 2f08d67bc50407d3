"""Desk-scale profile: grayscale test images as 128x128 RGB crops, JPEG only, 16 channels."""

from __future__ import annotations

from pathlib import Path

from .harness import ExperimentConfig, pil_jpeg
from .images import center_crop, gray_to_rgb, write_rgb
from .trainer import TrainConfig

DESK_IMAGES = ("camera", "coins", "moon", "text", "clock")
DESK_SIZE = 128
DESK_CHANNELS = 16


def write_desk_crops(directory, names=DESK_IMAGES, size: int = DESK_SIZE) -> list[str]:
    """Center-crop scikit-image sample images, replicate gray to RGB, save as PNG."""
    from skimage import data

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        path = directory / f"{name}.png"
        if not path.exists():
            write_rgb(path, gray_to_rgb(center_crop(getattr(data, name)(), size)))
        paths.append(str(path))
    return paths


def desk_config(images, out_dir, *, iterations: int = 200, seed: int = 0, l1_ablation: bool = False,
                parameterizations=("far", "vanilla"), workers: int = 1) -> ExperimentConfig:
    return ExperimentConfig(
        images=list(images),
        codecs=[pil_jpeg((15, 40, 65, 90))],
        out_dir=str(out_dir),
        train=TrainConfig(iterations=iterations, seed=seed),
        parameterizations=tuple(parameterizations),
        l1_ablation=l1_ablation,
        channels={"jpeg": DESK_CHANNELS},
        workers=workers,
    )
