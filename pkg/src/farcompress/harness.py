"""Rate-distortion experiments: external codecs, per-image over-fitting jobs, BD-rate tables."""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .images import read_rgb, to_tensor, to_uint8, write_rgb
from .metrics import BD_VARIANT, CurveError, RdCurve, RdPoint, bd_rate, ms_ssim, psnr, total_bpp
from .network import ModelConfig, forward, pad_to_multiple
from .trainer import TrainConfig, train_overfit, write_trace_csv
from .weight_codec import DEFAULT_LEVELS, entropy_decode, load_quantized, quantize, entropy_encode

log = logging.getLogger(__name__)

ANCHOR = "anchor"
CHANNEL_DEFAULTS = {"jpeg": 64, "heif": 32, "vvc": 16}
QUALITY_DEFAULTS = {"jpeg": [15, 40, 65, 90], "heif": [15, 40, 65, 90], "vvc": [37, 32, 27, 22]}
REPORT_METADATA = {
    "bd_rate_variant": BD_VARIANT,
    "msssim_axis": "MS-SSIM value used directly as the quality axis",
    "psnr": "single MSE over all RGB channels, 8-bit peak",
    "msssim": "BT.601 luma, Gaussian 11x11 sigma 1.5, up to 5 scales",
    "bpp": "(codec bits + weight bitstream bits incl. header) / (width * height)",
    "weight_coder": "adaptive binary range coder (DeepCABAC substitute)",
}


class ConfigError(ValueError):
    pass


class CodecError(RuntimeError):
    def __init__(self, message: str, command: list[str] | None = None, stderr: str = ""):
        detail = message
        if command:
            detail += f"\n  command: {shlex.join(command)}"
        if stderr:
            detail += f"\n  stderr: {stderr.strip()}"
        super().__init__(detail)
        self.command = command
        self.stderr = stderr


# ----------------------------------------------------------------------- codecs


@dataclass(frozen=True)
class CodecSpec:
    name: str
    encode: str
    decode: str
    qualities: tuple = (15, 40, 65, 90)
    pixel_format: str = "4:2:0"
    suffix: str = ".bin"

    def __post_init__(self):
        object.__setattr__(self, "qualities", tuple(self.qualities))
        for template, required in ((self.encode, ("input", "output", "quality")), (self.decode, ("input", "output"))):
            for key in required:
                n = template.count("{" + key + "}")
                if n != 1:
                    raise ConfigError(
                        f"codec {self.name!r}: template {template!r} must contain {{{key}}} exactly once (found {n})"
                    )
        if not self.qualities:
            raise ConfigError(f"codec {self.name!r} has no quality settings")


def pil_jpeg(qualities=(15, 40, 65, 90), pixel_format: str = "4:2:0") -> CodecSpec:
    sub = {"4:4:4": 0, "4:2:2": 1, "4:2:0": 2}[pixel_format]
    py = shlex.quote(sys.executable)
    return CodecSpec(
        "jpeg",
        f"{py} -m farcompress.pilcodec encode --subsampling {sub} --quality {{quality}} {{input}} {{output}}",
        f"{py} -m farcompress.pilcodec decode {{input}} {{output}}",
        tuple(qualities),
        pixel_format,
        ".jpg",
    )


def identity_codec(qualities=(0,)) -> CodecSpec:
    py = shlex.quote(sys.executable)
    return CodecSpec(
        "identity",
        f"{py} -m farcompress.pilcodec copy --quality {{quality}} {{input}} {{output}}",
        f"{py} -m farcompress.pilcodec copy {{input}} {{output}}",
        tuple(qualities),
        "4:4:4",
        ".png",
    )


def _render(template: str, **values) -> list[str]:
    tokens = shlex.split(template)
    out = []
    for tok in tokens:
        for key, val in values.items():
            tok = tok.replace("{" + key + "}", str(val))
        out.append(tok)
    return out


def _run(cmd: list[str]) -> None:
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False)
    except OSError as exc:
        raise CodecError(f"cannot execute codec command: {exc}", cmd) from exc
    if proc.returncode != 0:
        raise CodecError(f"codec command exited with status {proc.returncode}", cmd, proc.stderr)


def codec_roundtrip(spec: CodecSpec, image_path, quality, workdir) -> tuple[np.ndarray, int, Path]:
    """Encode + decode ``image_path`` at ``quality``; returns (decoded RGB, codec bits, decoded PNG path)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.name}_q{quality}"
    encoded = workdir / f"{stem}{spec.suffix}"
    decoded = workdir / f"{stem}_decoded.png"
    for p in (encoded, decoded):
        p.unlink(missing_ok=True)
    enc_cmd = _render(spec.encode, input=image_path, output=encoded, quality=quality)
    _run(enc_cmd)
    if not encoded.exists():
        raise CodecError("encoder did not produce its output file", enc_cmd)
    dec_cmd = _render(spec.decode, input=encoded, output=decoded)
    _run(dec_cmd)
    if not decoded.exists():
        raise CodecError("decoder did not produce its output file", dec_cmd)
    try:
        image = read_rgb(decoded)
    except Exception as exc:  # PIL raises several unrelated types
        raise CodecError(f"decoded output is not a readable image: {exc}", dec_cmd) from exc
    return image, 8 * encoded.stat().st_size, decoded


# ------------------------------------------------------------------ experiments


@dataclass
class ExperimentConfig:
    images: list[str]
    codecs: list[CodecSpec]
    out_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    parameterizations: tuple = ("far", "vanilla")
    l1_ablation: bool = False
    channels: dict = field(default_factory=dict)
    small_images: bool = False
    kernel_size: int = 3
    scales: int = 3
    max_level: int = DEFAULT_LEVELS
    workers: int = 1

    def __post_init__(self):
        if not self.images:
            raise ConfigError("at least one image is required")
        if not self.codecs:
            raise ConfigError("at least one codec is required")
        if not self.parameterizations:
            raise ConfigError("at least one parameterization is required")
        bad = set(self.parameterizations) - {"far", "vanilla"}
        if bad:
            raise ConfigError(f"unknown parameterizations {sorted(bad)}")
        names = [c.name for c in self.codecs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate codec names {names}")

    def channels_for(self, codec: str) -> int:
        if codec in self.channels:
            return int(self.channels[codec])
        n = CHANNEL_DEFAULTS.get(codec, 16)
        return max(1, n // 2) if self.small_images else n

    def variants(self) -> list[tuple[str, str, float]]:
        """(variant label, parameterization, l1 lambda) triples."""
        out = [(p, p, self.train.l1_lambda) for p in self.parameterizations]
        if self.l1_ablation:
            out += [(f"{p}_noL1", p, 0.0) for p in self.parameterizations]
        return out


@dataclass
class Job:
    image: str
    raw_path: str
    decoded_path: str
    codec: str
    quality: str
    codec_bits: int
    variant: str
    model: ModelConfig
    train: TrainConfig
    max_level: int
    out_dir: str


@dataclass
class JobResult:
    image: str
    codec: str
    quality: str
    variant: str
    bpp: float = math.nan
    psnr: float = math.nan
    msssim: float = math.nan
    weight_bits: int = 0
    codec_bits: int = 0
    error: str = ""


def image_key(path) -> str:
    return Path(path).stem


def run_job(job: Job) -> JobResult:
    """Train, compress, decode and evaluate one (image, codec setting, variant) job."""
    res = JobResult(job.image, job.codec, job.quality, job.variant, codec_bits=job.codec_bits)
    try:
        raw8 = read_rgb(job.raw_path)
        dec8 = read_rgb(job.decoded_path)
        if raw8.shape != dec8.shape:
            raise ValueError(f"decoded size {dec8.shape} differs from the original {raw8.shape}")
        h, w = raw8.shape[:2]
        raw, _ = pad_to_multiple(to_tensor(raw8), job.model.multiple)
        dec, _ = pad_to_multiple(to_tensor(dec8), job.model.multiple)
        state, trace = train_overfit(raw, dec, job.model, job.train)
        out = Path(job.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stream = entropy_encode(quantize(state, job.max_level))
        (out / "weights.farw").write_bytes(stream.data)
        decoded_q = entropy_decode((out / "weights.farw").read_bytes(), job.max_level)
        restored, _ = forward(load_quantized(state, decoded_q), dec)
        rest8 = to_uint8(restored[:, :, :h, :w])
        write_rgb(out / "restored.png", rest8)
        if trace:
            write_trace_csv(out / "trace.csv", trace)
        res.weight_bits = stream.total_bits
        res.bpp = total_bpp(job.codec_bits, stream.total_bits, h * w)
        res.psnr = psnr(raw8, rest8)
        res.msssim = ms_ssim(raw8, rest8)
    except Exception as exc:  # isolate failures per job
        log.exception("job %s/%s/%s/%s failed", job.image, job.codec, job.quality, job.variant)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


@dataclass
class SweepResult:
    curves: dict  # (image, codec, variant) -> RdCurve
    jobs: list[JobResult]
    errors: list[str]

    def curve_list(self) -> list[RdCurve]:
        return [self.curves[k] for k in sorted(self.curves)]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_rd_sweep(config: ExperimentConfig) -> SweepResult:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves: dict = {}
    errors: list[str] = []
    jobs: list[Job] = []
    for image_path in config.images:
        img = image_key(image_path)
        raw8 = read_rgb(image_path)
        pixels = raw8.shape[0] * raw8.shape[1]
        raw_copy = out / img / "raw.png"
        raw_copy.parent.mkdir(parents=True, exist_ok=True)
        write_rgb(raw_copy, raw8)
        for spec in config.codecs:
            anchor = curves.setdefault((img, spec.name, ANCHOR), RdCurve([], spec.name, img, ANCHOR))
            for variant, _, _ in config.variants():
                curves.setdefault((img, spec.name, variant), RdCurve([], spec.name, img, variant))
            for quality in spec.qualities:
                qdir = out / img / spec.name / f"q{quality}"
                try:
                    dec8, bits, dec_path = codec_roundtrip(spec, raw_copy, quality, qdir)
                except (CodecError, OSError) as exc:
                    log.error("%s", exc)
                    errors.append(f"{img}/{spec.name}/q{quality}: {exc}")
                    continue
                anchor.points.append(
                    RdPoint(total_bpp(bits, 0, pixels), psnr(raw8, dec8), ms_ssim(raw8, dec8), str(quality))
                )
                for variant, param, lam in config.variants():
                    model = ModelConfig(
                        channels=config.channels_for(spec.name),
                        kernel_size=config.kernel_size,
                        scales=config.scales,
                        parameterization=param,
                    )
                    jobs.append(
                        Job(img, str(raw_copy), str(dec_path), spec.name, str(quality), bits, variant, model,
                            replace(config.train, l1_lambda=lam), config.max_level, str(qdir / variant))
                    )
    results = _map(run_job, jobs, config.workers)
    for r in results:
        if r.error:
            errors.append(f"{r.image}/{r.codec}/q{r.quality}/{r.variant}: {r.error}")
            continue
        curves[(r.image, r.codec, r.variant)].points.append(RdPoint(r.bpp, r.psnr, r.msssim, r.quality))
    return SweepResult(curves, results, errors)


def compare_bd(curves) -> dict:
    """BD-rate of every variant against its codec anchor, per image and averaged per codec."""
    if isinstance(curves, SweepResult):
        curves = curves.curves
    if not isinstance(curves, dict):
        curves = {(c.image, c.codec, c.parameterization): c for c in curves}
    cells = []
    for key in sorted(curves):
        img, codec, variant = key
        if variant == ANCHOR:
            continue
        anchor = curves.get((img, codec, ANCHOR))
        cell = {"image": img, "codec": codec, "parameterization": variant}
        for metric in ("psnr", "msssim"):
            try:
                if anchor is None:
                    raise CurveError(f"no anchor curve for {img}/{codec}")
                cell[f"bd_rate_{metric}"] = bd_rate(anchor, curves[key], metric)
            except CurveError as exc:
                cell[f"bd_rate_{metric}"] = None
                cell[f"error_{metric}"] = str(exc)
        cell["worse_than_codec"] = cell["bd_rate_psnr"] is not None and cell["bd_rate_psnr"] > 0
        cells.append(cell)
    means: dict = {}
    for cell in cells:
        slot = means.setdefault(cell["codec"], {}).setdefault(cell["parameterization"], {"psnr": [], "msssim": []})
        for metric in ("psnr", "msssim"):
            v = cell[f"bd_rate_{metric}"]
            if v is not None:
                slot[metric].append(v)
    summary = {
        codec: {
            variant: {
                f"mean_bd_rate_{m}": (float(np.mean(vals)) if vals else None) for m, vals in slot.items()
            }
            for variant, slot in per.items()
        }
        for codec, per in means.items()
    }
    for per in summary.values():
        for stats in per.values():
            stats["worse_than_codec"] = stats["mean_bd_rate_psnr"] is not None and stats["mean_bd_rate_psnr"] > 0
    return {"variant_metadata": REPORT_METADATA, "cells": cells, "means": summary}


def curves_json(result: SweepResult, report: dict | None = None) -> list[dict]:
    report = report or compare_bd(result)
    bd = {(c["image"], c["codec"], c["parameterization"]): c for c in report["cells"]}
    docs = []
    for curve in result.curve_list():
        doc = curve.to_json()
        cell = bd.get((curve.image, curve.codec, curve.parameterization), {})
        doc["bd_rate_psnr"] = cell.get("bd_rate_psnr")
        doc["bd_rate_msssim"] = cell.get("bd_rate_msssim")
        doc["variant_metadata"] = REPORT_METADATA
        docs.append(doc)
    return docs


def write_reports(result: SweepResult, out_dir, plots: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = compare_bd(result)
    report["errors"] = list(result.errors)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "curves.json").write_text(json.dumps(curves_json(result, report), indent=2, sort_keys=True) + "\n")
    with open(out / "curves.csv", "w") as fh:
        fh.write("image,codec,parameterization,label,bpp,psnr,msssim\n")
        for c in result.curve_list():
            for p in c.sorted().points:
                fh.write(f"{c.image},{c.codec},{c.parameterization},{p.label},{p.bpp!r},{p.psnr!r},{p.msssim!r}\n")
    if plots:
        plot_curves(result, out / "plots")
    return report


def plot_curves(result: SweepResult, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict = {}
    for (img, codec, variant), curve in sorted(result.curves.items()):
        groups.setdefault((img, codec), []).append(curve)
    for (img, codec), group in groups.items():
        fig, ax = plt.subplots(figsize=(5, 4))
        for curve in group:
            pts = [p for p in curve.sorted().points if math.isfinite(p.psnr)]
            ax.plot([p.bpp for p in pts], [p.psnr for p in pts], marker="o", label=curve.parameterization)
        ax.set_xlabel("bits per pixel")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(f"{img} / {codec}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{img}_{codec}.png", metadata={"Software": None})
        plt.close(fig)


def convergence_study(config: ExperimentConfig, budgets) -> dict:
    """Re-run the sweep for each total iteration budget; returns {budget: (SweepResult, report)}."""
    budgets = [int(b) for b in budgets]
    if not budgets:
        raise ConfigError("at least one iteration budget is required")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ConfigError(f"iteration budgets must be strictly increasing, got {budgets}")
    out = {}
    for b in budgets:
        cfg = replace(config, train=replace(config.train, iterations=b), out_dir=str(Path(config.out_dir) / f"iters_{b}"))
        result = run_rd_sweep(cfg)
        out[b] = (result, compare_bd(result))
    return out


def convergence_table(study: dict) -> dict:
    table = {}
    for budget, (_, report) in study.items():
        for codec, per in report["means"].items():
            for variant, stats in per.items():
                table.setdefault(codec, {}).setdefault(variant, {})[budget] = stats["mean_bd_rate_psnr"]
    return table
