"""TOML experiment configuration.

Example::

    [experiment]
    images = ["crops/camera.png", "crops/coins.png"]
    out = "runs/desk"
    parameterizations = ["far", "vanilla"]
    l1_ablation = false
    small_images = false
    workers = 1

    [model]
    kernel_size = 3
    scales = 3
    channels = { jpeg = 16 }

    [train]
    iterations = 200
    initial_lr = 0.05
    l1_lambda = 1e-3
    seed = 0

    [[codec]]
    name = "jpeg"            # built-in Pillow JPEG when no templates are given
    qualities = [15, 40, 65, 90]

    [[codec]]
    name = "heif"
    encode = "heif-enc -q {quality} -o {output} {input}"
    decode = "heif-dec {input} {output}"
    qualities = [15, 40, 65, 90]
    pixel_format = "4:2:0"
    suffix = ".heic"
"""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .harness import QUALITY_DEFAULTS, CodecSpec, ConfigError, ExperimentConfig, pil_jpeg
from .trainer import TrainConfig

_TRAIN_KEYS = {"iterations", "initial_lr", "l1_lambda", "seed", "trace_every", "beta1", "beta2", "adam_eps", "value_range"}


def codec_from_table(doc: dict) -> CodecSpec:
    name = doc.get("name")
    if not name:
        raise ConfigError("every [[codec]] needs a name")
    qualities = doc.get("qualities", QUALITY_DEFAULTS.get(name, [15, 40, 65, 90]))
    if "encode" not in doc and "decode" not in doc:
        if name != "jpeg":
            raise ConfigError(f"codec {name!r} needs encode/decode templates (only jpeg has a built-in)")
        return pil_jpeg(qualities, doc.get("pixel_format", "4:2:0"))
    return CodecSpec(
        name,
        doc.get("encode", ""),
        doc.get("decode", ""),
        tuple(qualities),
        doc.get("pixel_format", "4:2:0"),
        doc.get("suffix", ".bin"),
    )


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return config_from_dict(doc, base_dir=path.parent, **overrides)


def config_from_dict(doc: dict, base_dir=".", **overrides) -> ExperimentConfig:
    exp = doc.get("experiment", {})
    model = doc.get("model", {})
    train_doc = doc.get("train", {})
    unknown = set(train_doc) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
    base = Path(base_dir)
    images = [str(p if Path(p).is_absolute() else base / p) for p in exp.get("images", [])]
    codecs = [codec_from_table(c) for c in doc.get("codec", [{"name": "jpeg"}])]
    train = TrainConfig(**train_doc)
    kwargs = dict(
        images=images,
        codecs=codecs,
        out_dir=str(exp.get("out", "runs")),
        train=train,
        parameterizations=tuple(exp.get("parameterizations", ("far", "vanilla"))),
        l1_ablation=bool(exp.get("l1_ablation", False)),
        channels=dict(model.get("channels", {})),
        small_images=bool(exp.get("small_images", False)),
        kernel_size=int(model.get("kernel_size", 3)),
        scales=int(model.get("scales", 3)),
        max_level=int(model.get("max_level", 127)),
        workers=int(exp.get("workers", 1)),
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kwargs)
