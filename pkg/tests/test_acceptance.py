"""Acceptance criteria, each checked at its stated tolerance.

Every test logs one PASS/FAIL line; the lines are collected into an
"acceptance criteria" section at the end of the pytest run.  The desk-scale
experiments (five 128x128 crops, JPEG q15/40/65/90, N=16) are shared through
module-scoped fixtures; together they take roughly half an hour on one CPU.
"""

import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest

from conftest import numerical_grad, rel_err
from test_metrics import oracle_ms_ssim, quadrature_bd, random_curve, smooth_image

from farcompress import harness
from farcompress import tensor as T
from farcompress.desk import desk_config, write_desk_crops
from farcompress.far import build_dct_bank, far_gradient, project_to_frequency, reparameterize
from farcompress.images import read_rgb, to_tensor
from farcompress.metrics import RdCurve, RdPoint, bd_rate, bd_rate_arrays, ms_ssim
from farcompress.network import PARAM_NAMES, ModelConfig, backward, forward, init_model, pad_to_multiple
from farcompress.spectral import SpectralRecorder, iterations_to_fraction
from farcompress.trainer import TrainConfig, train_overfit
from farcompress.weight_codec import (
    DEFAULT_LEVELS,
    DecodeError,
    decode_levels,
    dequantize,
    encode_levels,
    entropy_decode,
    entropy_encode,
    quantize,
)

MECHANISM_QUALITY = 40


# ------------------------------------------------------------- fast criteria


def test_dct_bank(criterion):
    with criterion("DCT bank correctness (Gram - I < 1e-12 for k=1..7; 3x3 DC = 1/3)") as c:
        worst = 0.0
        for h in range(1, 8):
            for w in range(1, 8):
                m = build_dct_bank(h, w).matrix
                worst = max(worst, np.abs(m @ m.T - np.eye(h * w)).max())
        c.note(f"max |Gram-I| = {worst:.2e}")
        assert worst < 1e-12
        assert np.all(np.abs(build_dct_bank(3, 3).kernel(0, 0) - 1 / 3) < 1e-15)


def test_reparameterization_round_trip(criterion):
    with criterion("Re-parameterization round trip on 100 tensors (1e-12)") as c:
        r = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            k = int(r.choice([1, 3, 5, 7]))
            bank = build_dct_bank(k, k)
            shape = (int(r.integers(1, 5)), int(r.integers(1, 5)), k, k)
            v = r.normal(size=shape)
            kern = r.normal(size=shape)
            worst = max(
                worst,
                np.abs(project_to_frequency(reparameterize(v, bank), bank) - v).max(),
                np.abs(reparameterize(project_to_frequency(kern, bank), bank) - kern).max(),
                abs(np.linalg.norm(reparameterize(v, bank)) - np.linalg.norm(v)),
            )
        c.note(f"max deviation = {worst:.2e}")
        assert worst < 1e-12


def _grad_suite_seed(seed):
    """Relative errors of every backward operation against central differences for one seed."""
    r = np.random.default_rng(seed)
    errs = {}
    n, m, o = (int(v) for v in r.integers(1, 4, size=3))
    h, w = (int(v) for v in r.integers(3, 7, size=2))

    x = r.normal(size=(n, m, h, w))
    k = r.normal(size=(m, o, 3, 3))
    b = r.normal(size=o)
    g = r.normal(size=(n, o, h, w))
    f = lambda: float(np.sum(g * T.conv2d_forward(x, k, b)))
    gx, gk, gb = T.conv2d_backward(x, k, g)
    errs["conv"] = max(rel_err(gx, numerical_grad(f, x)), rel_err(gk, numerical_grad(f, k)), rel_err(gb, numerical_grad(f, b)))

    xn = r.normal(size=(n, m, h, w))
    gn = r.normal(size=xn.shape)
    _, saved = T.instance_norm_forward(xn)
    f = lambda: float(np.sum(gn * T.instance_norm_forward(xn)[0]))
    errs["instance_norm"] = rel_err(T.instance_norm_backward(saved, xn, gn), numerical_grad(f, xn))

    xr = r.normal(size=(n, m, h, w))
    xr[np.abs(xr) < 1e-3] = 0.5  # keep away from the kink
    _, mask = T.relu_forward(xr)
    f = lambda: float(np.sum(gn * T.relu_forward(xr)[0]))
    errs["relu"] = rel_err(T.relu_backward(mask, gn), numerical_grad(f, xr))

    for mode, shape in (("down2", (n, m, 2 * h, 2 * w)), ("up2", (n, m, h, w))):
        xs = r.normal(size=shape)
        gs = r.normal(size=T.resample(xs, mode).shape)
        f = lambda: float(np.sum(gs * T.resample(xs, mode)))
        errs[mode] = rel_err(T.resample_backward(gs, mode), numerical_grad(f, xs))

    p, t = r.normal(size=(n, m, h, w)), r.normal(size=(n, m, h, w))
    errs["mse"] = rel_err(T.mse_loss(p, t)[1], numerical_grad(lambda: T.mse_loss(p, t)[0], p))

    bank = build_dct_bank(3, 3)
    v = r.normal(size=(m, o, 3, 3))
    tgt = r.normal(size=(n, o, h, w))
    f = lambda: T.mse_loss(T.conv2d_forward(x, reparameterize(v, bank)), tgt)[0]
    _, gl = T.mse_loss(T.conv2d_forward(x, reparameterize(v, bank)), tgt)
    _, gk, _ = T.conv2d_backward(x, reparameterize(v, bank), gl)
    errs["far_chain"] = rel_err(far_gradient(gk, bank), numerical_grad(f, v))

    param = "far" if seed % 2 == 0 else "vanilla"
    cfg = ModelConfig(2, scales=3, parameterization=param, residual_scale=0.05)
    state = init_model(cfg, seed)
    dec = r.uniform(0.25, 0.75, (1, 3, 8, 8))
    raw = r.uniform(0.25, 0.75, (1, 3, 8, 8))
    out, cache = forward(state, dec)
    grads = backward(state, cache, T.mse_loss(out, raw)[1])
    net = 0.0
    for name in PARAM_NAMES:
        if name in ("b1", "b2"):  # biases feeding instance norm have no effect
            continue
        numeric = numerical_grad(lambda: T.mse_loss(forward(state, dec)[0], raw)[0], state.params[name])
        net = max(net, rel_err(grads[name], numeric))
    errs["restore_net"] = net
    return errs


def test_gradient_suite(criterion):
    with criterion("Gradient suite: all backward ops vs finite differences (<1e-4, 20 seeds)") as c:
        worst: dict = {}
        for seed in range(20):
            for name, e in _grad_suite_seed(seed).items():
                worst[name] = max(worst.get(name, 0.0), e)
        c.note(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
        assert max(worst.values()) < 1e-4


def test_weight_codec(criterion):
    with criterion("Weight codec: 1e5 lossless round trips, |err| <= step/2, fuzz in range, L=127") as c:
        r = np.random.default_rng(0)
        for _ in range(100_000):
            size = int(r.integers(1, 17))
            lv = r.integers(-127, 128, size)
            lv[r.random(size) < r.random()] = 0
            out = decode_levels(encode_levels(lv), size)
            assert np.array_equal(out, lv)
        worst = 0.0
        for seed in range(20):
            state = init_model(ModelConfig(4, parameterization=("far", "vanilla")[seed % 2]), seed)
            q = quantize(state)
            deq = dequantize(q)
            worst = max(worst, max(np.abs(deq[n] - state.params[n]).max() / q.step for n in state.params))
        c.note(f"max |err|/step = {worst:.3f}")
        assert worst <= 0.5 + 1e-12
        assert DEFAULT_LEVELS == 127 and quantize(state).max_level == 127

        q = quantize(init_model(ModelConfig(2), 0))
        data = entropy_encode(q).data
        payload_bits = struct.unpack_from("<Q", data, 8 + sum(1 + len(n) + 16 for n, _ in q.layout) + 8)[0]
        header = len(data) - payload_bits // 8
        decoded = rejected = 0
        for _ in range(1000):
            junk = r.integers(0, 256, size=len(data) - header, dtype=np.uint8).tobytes()
            try:
                out = entropy_decode(data[:header] + junk)
            except DecodeError:
                rejected += 1
                continue
            decoded += 1
            assert all(np.abs(v).max(initial=0) <= 127 for v in out.levels.values())
        c.note(f"fuzz: {decoded} decoded in range, {rejected} rejected")


def test_bd_rate_oracle(criterion):
    with criterion("BD-rate: quadrature oracle within 0.1pp on 100 curve pairs; identity 0; halved -50%") as c:
        r = np.random.default_rng(42)
        worst, pairs = 0.0, 0
        while pairs < 100:
            ra, qa = random_curve(r)
            rt, qt = random_curve(r)
            if min(qa.max(), qt.max()) - max(qa.min(), qt.min()) < 1.0:
                continue
            worst = max(worst, abs(bd_rate_arrays(ra, qa, rt, qt) - quadrature_bd(ra, qa, rt, qt)))
            pairs += 1
        c.note(f"max |diff| = {worst:.2e} pp")
        assert worst < 0.1
        a = RdCurve([RdPoint(b, q) for b, q in [(0.25, 30), (0.5, 33), (1, 36), (2, 39)]])
        half = RdCurve([RdPoint(p.bpp / 2, p.psnr) for p in a.points])
        assert bd_rate(a, a) == 0.0
        assert bd_rate(a, half) == pytest.approx(-50.0, abs=1e-9)


def test_ms_ssim(criterion):
    with criterion("MS-SSIM: identical -> 1.0; definition-level oracle within 1e-4 on 10 pairs") as c:
        worst = 0.0
        for seed in range(10):
            r = np.random.default_rng(100 + seed)
            ref = smooth_image(r, 96, 96 - 8 * (seed % 3))
            assert ms_ssim(ref, ref) == 1.0
            sigma = 3 + 3 * seed
            test = np.clip(ref + r.normal(0, sigma, ref.shape), 0, 255).astype(np.uint8)
            worst = max(worst, abs(ms_ssim(ref, test) - oracle_ms_ssim(ref, test)))
        c.note(f"max |diff| = {worst:.2e}")
        assert worst < 1e-4


# --------------------------------------------------------- desk experiments


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return root, write_desk_crops(root / "crops")


@pytest.fixture(scope="module")
def sweep200(desk):
    root, images = desk
    cfg = desk_config(images, root / "iters_200", iterations=200, l1_ablation=True)
    result = harness.run_rd_sweep(cfg)
    report = harness.write_reports(result, cfg.out_dir, plots=False)
    return cfg, result, report


@pytest.fixture(scope="module")
def sweep50(desk):
    root, images = desk
    cfg = desk_config(images, root / "iters_50", iterations=50)
    result = harness.run_rd_sweep(cfg)
    return cfg, result, harness.compare_bd(result)


def _means(report):
    return {k: v["mean_bd_rate_psnr"] for k, v in report["means"]["jpeg"].items()}


@pytest.mark.slow
def test_desk_rd_directional(sweep200, criterion):
    _, result, report = sweep200
    means = _means(report)
    with criterion("Desk R-D (a): FAR mean BD-rate(PSNR) < vanilla mean BD-rate(PSNR)") as c:
        assert result.errors == []
        c.note(f"FAR {means['far']:+.2f}%, vanilla {means['vanilla']:+.2f}%")
        assert means["far"] < means["vanilla"]
    with criterion("Desk R-D (b): FAR mean BD-rate(PSNR) < 0 vs JPEG") as c:
        c.note(f"FAR {means['far']:+.2f}%")
        assert means["far"] < 0


@pytest.mark.slow
def test_restoration_never_hurts(sweep200, criterion):
    curves = sweep200[1].curves
    with criterion("Desk sweep: every restored PSNR >= decoded PSNR - 0.1 dB") as c:
        worst = math.inf
        for (img, codec, variant), curve in curves.items():
            if variant == "anchor":
                continue
            anchor = {p.label: p.psnr for p in curves[(img, codec, "anchor")].points}
            worst = min([worst] + [p.psnr - anchor[p.label] for p in curve.points])
        c.note(f"worst change {worst:+.3f} dB")
        assert worst >= -0.1


@pytest.mark.slow
def test_l1_ablation_ordering(sweep200, criterion):
    means = _means(sweep200[2])
    with criterion("Ablation ordering: L1 helps both; FAR <= vanilla with and without L1") as c:
        c.note(", ".join(f"{k} {v:+.2f}%" for k, v in sorted(means.items())))
        assert means["far"] <= means["far_noL1"]
        assert means["vanilla"] <= means["vanilla_noL1"]
        assert means["far"] <= means["vanilla"]
        assert means["far_noL1"] <= means["vanilla_noL1"]


@pytest.mark.slow
def test_convergence_trend(sweep50, sweep200, criterion):
    m50, m200 = _means(sweep50[2]), _means(sweep200[2])
    with criterion("Convergence trend: (vanilla - FAR) gap at 50 iterations >= gap at 200") as c:
        gap50, gap200 = m50["vanilla"] - m50["far"], m200["vanilla"] - m200["far"]
        c.note(f"gap@50 {gap50:.2f}pp, gap@200 {gap200:.2f}pp")
        assert gap50 >= gap200


@pytest.mark.slow
def test_spectral_mechanism(desk, criterion):
    root, images = desk
    hf = {"far": [], "vanilla": []}
    t90 = {"far": [], "vanilla": []}
    for path in images:
        raw8 = read_rgb(path)
        dec8, _, _ = harness.codec_roundtrip(harness.pil_jpeg((MECHANISM_QUALITY,)), path, MECHANISM_QUALITY, root / "mech")
        for param in hf:
            mc = ModelConfig(channels=16, parameterization=param)
            raw, _ = pad_to_multiple(to_tensor(raw8), mc.multiple)
            dec, _ = pad_to_multiple(to_tensor(dec8), mc.multiple)
            rec = SpectralRecorder(4)
            train_overfit(raw, dec, mc, TrainConfig(iterations=200), observer=rec)
            hf[param].append(rec.mean_hf_update_share())
            series = rec.image_series()
            t90[param].append([iterations_to_fraction(series[:, i, j]) for i in range(4) for j in range(4) if i or j])
    with criterion("Weight-update spectrum: FAR high-frequency weight-update share > vanilla") as c:
        far_hf, van_hf = float(np.mean(hf["far"])), float(np.mean(hf["vanilla"]))
        c.note(f"FAR {far_hf:.3f}, vanilla {van_hf:.3f}")
        assert far_hf > van_hf
    with criterion("Image-subband convergence: FAR reaches 90% sooner in >= half of the 15 AC subbands") as c:
        far_t, van_t = np.mean(t90["far"], axis=0), np.mean(t90["vanilla"], axis=0)
        faster = int(np.sum(far_t < van_t))
        c.note(f"{faster}/15 subbands faster (mean iterations FAR {far_t.mean():.1f}, vanilla {van_t.mean():.1f})")
        assert faster >= 15 / 2


@pytest.mark.slow
def test_determinism(desk, sweep200, criterion):
    root, images = desk
    cfg200, result200, _ = sweep200
    with criterion("Determinism: rerun gives byte-identical weight bitstreams and reports") as c:
        subset = [images[0]]
        rerun_cfg = desk_config(subset, root / "rerun", iterations=200)
        rerun = harness.run_rd_sweep(rerun_cfg)
        img = Path(subset[0]).stem
        compared = 0
        for first in sorted((Path(cfg200.out_dir) / img).rglob("weights.farw")):
            variant = first.parent.name
            if variant not in ("far", "vanilla"):
                continue
            second = Path(rerun_cfg.out_dir) / first.relative_to(cfg200.out_dir)
            assert first.read_bytes() == second.read_bytes(), f"{first} differs"
            compared += 1
        assert compared == 8

        def report_bytes(curves):
            subset_curves = {k: v for k, v in curves.items() if k[0] == img and k[2] in ("anchor", "far", "vanilla")}
            report = harness.compare_bd(subset_curves)
            docs = [subset_curves[k].to_json() for k in sorted(subset_curves)]
            return json.dumps([report, docs], sort_keys=True).encode()

        assert report_bytes(result200.curves) == report_bytes(rerun.curves)
        c.note(f"{compared} bitstreams and the {img} report identical")
