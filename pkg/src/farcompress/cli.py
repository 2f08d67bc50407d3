"""Command line entry point: ``farc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import load_config
from .images import read_rgb, to_tensor, to_uint8, write_rgb
from .metrics import RdCurve, ms_ssim, psnr, total_bpp
from .network import ModelConfig, forward, pad_to_multiple
from .spectral import SpectralRecorder, iterations_to_fraction, write_grid_csv
from .toy import ToyConfig, train_toy
from .trainer import TrainConfig, train_overfit, write_trace_csv
from .weight_codec import entropy_decode, entropy_encode, load_quantized, quantize


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--l1", type=float, default=None, help="L1 penalty (default 1e-3)")
    p.add_argument("--parameterization", choices=["far", "vanilla", "both"], default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)


def _params(choice: str | None) -> tuple:
    if choice in (None, "both"):
        return ("far", "vanilla")
    return (choice,)


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.l1 is not None:
        changes["l1_lambda"] = args.l1
    return replace(base, **changes)


def _experiment(args):
    cfg = load_config(args.config)
    changes = {"train": _train_config(args, cfg.train)}
    if args.parameterization:
        changes["parameterizations"] = _params(args.parameterization)
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out:
        changes["out_dir"] = args.out
    if args.channels is not None:
        changes["channels"] = {c.name: args.channels for c in cfg.codecs}
    return replace(cfg, **changes)


def cmd_overfit(args) -> int:
    out = Path(args.out or "overfit_out")
    out.mkdir(parents=True, exist_ok=True)
    raw8 = read_rgb(args.image)
    h, w = raw8.shape[:2]
    if args.decoded:
        dec8 = read_rgb(args.decoded)
        codec_bits = args.codec_bits or 0
    else:
        dec8, codec_bits, _ = harness.codec_roundtrip(harness.pil_jpeg((args.quality,)), args.image, args.quality, out)
    tcfg = _train_config(args, TrainConfig(trace_every=10))
    summary = {"image": args.image, "codec_bits": codec_bits, "decoded_psnr": psnr(raw8, dec8), "runs": {}}
    for param in _params(args.parameterization):
        mcfg = ModelConfig(channels=args.channels or 16, parameterization=param)
        raw, _ = pad_to_multiple(to_tensor(raw8), mcfg.multiple)
        dec, _ = pad_to_multiple(to_tensor(dec8), mcfg.multiple)
        state, trace = train_overfit(raw, dec, mcfg, tcfg)
        stream = entropy_encode(quantize(state))
        (out / f"{param}.farw").write_bytes(stream.data)
        restored, _ = forward(load_quantized(state, entropy_decode(stream)), dec)
        rest8 = to_uint8(restored[:, :, :h, :w])
        write_rgb(out / f"{param}_restored.png", rest8)
        write_trace_csv(out / f"{param}_trace.csv", trace)
        summary["runs"][param] = {
            "weight_bits": stream.total_bits,
            "bpp": total_bpp(codec_bits, stream.total_bits, h * w),
            "psnr": psnr(raw8, rest8),
            "msssim": ms_ssim(raw8, rest8),
        }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    result = harness.run_rd_sweep(cfg)
    report = harness.write_reports(result, cfg.out_dir)
    print(json.dumps(report["means"], indent=2))
    return 1 if result.errors else 0


def cmd_bdrate(args) -> int:
    curves = []
    for path in args.curves:
        doc = json.loads(Path(path).read_text())
        curves.extend(RdCurve.from_json(d) for d in (doc if isinstance(doc, list) else [doc]))
    report = harness.compare_bd(curves)
    print(f"{'image':<16}{'codec':<10}{'variant':<16}{'BD PSNR %':>12}{'BD MS-SSIM %':>14}")
    for cell in report["cells"]:
        fmt = lambda v: "n/a" if v is None else f"{v:.2f}"
        flag = "  worse" if cell["worse_than_codec"] else ""
        print(f"{cell['image']:<16}{cell['codec']:<10}{cell['parameterization']:<16}"
              f"{fmt(cell['bd_rate_psnr']):>12}{fmt(cell['bd_rate_msssim']):>14}{flag}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_spectra(args) -> int:
    out = Path(args.out or "spectra_out")
    out.mkdir(parents=True, exist_ok=True)
    raw8 = read_rgb(args.image)
    dec8, _, _ = harness.codec_roundtrip(harness.pil_jpeg((args.quality,)), args.image, args.quality, out)
    tcfg = _train_config(args, TrainConfig(trace_every=1))
    summary = {}
    for param in _params(args.parameterization):
        mcfg = ModelConfig(channels=args.channels or 16, parameterization=param)
        raw, _ = pad_to_multiple(to_tensor(raw8), mcfg.multiple)
        dec, _ = pad_to_multiple(to_tensor(dec8), mcfg.multiple)
        rec = SpectralRecorder(args.block)
        _, trace = train_overfit(raw, dec, mcfg, tcfg, observer=rec)
        write_trace_csv(out / f"{param}_trace.csv", trace)
        write_grid_csv(out / f"{param}_image_subbands.csv", rec.iterations, rec.image_grids)
        write_grid_csv(out / f"{param}_weight_updates.csv", rec.iterations, rec.update_grids)
        series = rec.image_series()
        summary[param] = {
            "mean_hf_update_share": rec.mean_hf_update_share(),
            "iterations_to_90pct": {
                f"{i}{j}": iterations_to_fraction(series[:, i, j])
                for i in range(args.block) for j in range(args.block) if (i, j) != (0, 0)
            },
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_toy(args) -> int:
    out = Path(args.out or "toy_out")
    out.mkdir(parents=True, exist_ok=True)
    raw8 = read_rgb(args.image)
    dec8, _, _ = harness.codec_roundtrip(harness.pil_jpeg((args.quality,)), args.image, args.quality, out)
    summary = {}
    for param in _params(args.parameterization):
        cfg = ToyConfig(
            channels=args.channels or 64,
            iterations=args.iterations if args.iterations is not None else 5000,
            lr=args.lr,
            parameterization=param,
            seed=args.seed or 0,
        )
        rec = SpectralRecorder(args.block)
        _, trace = train_toy(to_tensor(raw8), to_tensor(dec8), cfg, observer=rec)
        write_trace_csv(out / f"{param}_trace.csv", trace)
        write_grid_csv(out / f"{param}_image_subbands.csv", rec.iterations, rec.image_grids)
        write_grid_csv(out / f"{param}_weight_updates.csv", rec.iterations, rec.update_grids)
        series = rec.image_series()
        summary[param] = {
            "final_psnr": trace[-1].psnr if trace else None,
            "mean_hf_update_share": rec.mean_hf_update_share(),
            "iterations_to_90pct": {
                f"{i}{j}": iterations_to_fraction(series[:, i, j])
                for i in range(args.block) for j in range(args.block) if (i, j) != (0, 0)
            },
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_converge(args) -> int:
    cfg = _experiment(args)
    budgets = [int(b) for b in args.budgets.split(",")]
    study = harness.convergence_study(cfg, budgets)
    for budget, (result, _) in study.items():
        harness.write_reports(result, Path(cfg.out_dir) / f"iters_{budget}", plots=False)
    table = harness.convergence_table(study)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "convergence.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(json.dumps(table, indent=2))
    return 0


def cmd_decode_weights(args) -> int:
    q = entropy_decode(Path(args.bitstream).read_bytes())
    info = {
        "parameterization": q.parameterization,
        "step": q.step,
        "bits": 8 * Path(args.bitstream).stat().st_size,
        "tensors": [
            {
                "name": name,
                "shape": list(shape),
                "nonzero": int(np.count_nonzero(q.levels[name])),
                "max_abs_level": int(np.abs(q.levels[name]).max(initial=0)),
            }
            for name, shape in q.layout
        ],
    }
    print(json.dumps(info, indent=2))
    if args.npz:
        np.savez(args.npz, **{n: q.levels[n].astype(np.float64) * q.step for n, _ in q.layout})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="farc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("overfit", help="compress one image with JPEG and over-fit a restoration network")
    p.add_argument("image")
    p.add_argument("--quality", type=int, default=40)
    p.add_argument("--decoded", help="use an already decoded image instead of running JPEG")
    p.add_argument("--codec-bits", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_overfit)

    p = sub.add_parser("sweep", help="R-D sweep from a TOML experiment config")
    p.add_argument("config")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bdrate", help="BD-rate table from curves.json files")
    p.add_argument("curves", nargs="+")
    p.add_argument("--json", help="also write the report here")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("spectra", help="per-iteration subband traces for FAR and vanilla")
    p.add_argument("image")
    p.add_argument("--quality", type=int, default=15)
    p.add_argument("--block", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("toy", help="long-run three-layer CNN over-fit with subband traces")
    p.add_argument("image")
    p.add_argument("--quality", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--block", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("converge", help="BD-rate versus total iteration budget")
    p.add_argument("config")
    p.add_argument("--budgets", default="50,100,200")
    _common(p)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("decode-weights", help="inspect a FARW weight bitstream")
    p.add_argument("bitstream")
    p.add_argument("--npz", help="write dequantized weights to this .npz file")
    p.set_defaults(func=cmd_decode_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
