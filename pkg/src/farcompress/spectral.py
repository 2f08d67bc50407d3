"""Frequency-domain diagnostics: block-DCT subband statistics of images and of weight updates."""

from __future__ import annotations

import csv

import numpy as np

from .far import DctBank, dct_basis_1d, project_to_frequency
from .metrics import luma
from .network import WEIGHT_NAMES, ModelState
from .tensor import ShapeError


def block_dct(channel: np.ndarray, block: int = 4) -> np.ndarray:
    """Orthonormal 2-D DCT-II of non-overlapping blocks; returns (rows, cols, B, B).

    Trailing rows/columns that do not fill a whole block are dropped.
    """
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D channel, got {x.shape}")
    rows, cols = x.shape[0] // block, x.shape[1] // block
    x = x[: rows * block, : cols * block].reshape(rows, block, cols, block).transpose(0, 2, 1, 3)
    a = dct_basis_1d(block)
    return np.einsum("ih,rchw,jw->rcij", a, x, a, optimize=True)


def inverse_block_dct(coeffs: np.ndarray) -> np.ndarray:
    rows, cols, block, _ = coeffs.shape
    a = dct_basis_1d(block)
    x = np.einsum("ih,rcij,jw->rchw", a, coeffs, a, optimize=True)
    return x.transpose(0, 2, 1, 3).reshape(rows * block, cols * block)


def mean_abs_subbands(channel: np.ndarray, block: int = 4) -> np.ndarray:
    """(B, B) grid of mean |coefficient| over all blocks."""
    return np.abs(block_dct(channel, block)).mean(axis=(0, 1))


def weight_update_subbands(
    before: np.ndarray, after: np.ndarray, bank: DctBank, frequency_domain: bool = False
) -> np.ndarray:
    """(H, W) grid of mean |change of DCT coefficient| over all (m, n) kernel pairs.

    With ``frequency_domain`` the tensors already hold DCT coefficients (FAR weights).
    """
    if before.shape != after.shape:
        raise ShapeError(f"before {before.shape} and after {after.shape} differ")
    if frequency_domain:
        if before.ndim != 4 or before.shape[2:] != (bank.height, bank.width):
            raise ShapeError(f"weights {before.shape} do not match a {bank.height}x{bank.width} bank")
        delta = after - before
    else:
        delta = project_to_frequency(after, bank) - project_to_frequency(before, bank)
    return np.abs(delta).mean(axis=(0, 1))


def high_frequency_order(height: int, width: int) -> list[tuple[int, int]]:
    """Subbands sorted from highest to lowest radial frequency (ties: larger max index first)."""
    idx = [(i, j) for i in range(height) for j in range(width)]
    return sorted(idx, key=lambda ij: (ij[0] ** 2 + ij[1] ** 2, max(ij), ij[0]), reverse=True)


def high_frequency_share(grid: np.ndarray, count: int = 5) -> float:
    total = float(grid.sum())
    if total == 0.0:
        return 0.0
    top = high_frequency_order(*grid.shape)[:count]
    return sum(float(grid[i, j]) for i, j in top) / total


def model_update_subbands(before: ModelState, after: ModelState) -> np.ndarray:
    """Weight-update grid pooled over every conv layer of a model."""
    cfg = before.config
    from .far import build_dct_bank

    bank = build_dct_bank(cfg.kernel_size, cfg.kernel_size)
    freq = cfg.parameterization == "far"
    total = np.zeros((cfg.kernel_size, cfg.kernel_size))
    pairs = 0
    for name in WEIGHT_NAMES:
        b, a = before.params[name], after.params[name]
        n = b.shape[0] * b.shape[1]
        total += weight_update_subbands(b, a, bank, frequency_domain=freq) * n
        pairs += n
    return total / pairs


def restored_luma(restored: np.ndarray) -> np.ndarray:
    """Luma in 8-bit code values of a 1x3xHxW image in [0, 1]."""
    return luma(restored[0].transpose(1, 2, 0) * 255.0)


class SpectralRecorder:
    """Trainer observer collecting per-iteration image and weight-update subband grids."""

    def __init__(self, block: int = 4):
        self.block = block
        self.iterations: list[int] = []
        self.image_grids: list[np.ndarray] = []
        self.update_grids: list[np.ndarray] = []

    def __call__(self, iteration, before, after, restored):
        img = mean_abs_subbands(restored_luma(restored), self.block)
        upd = model_update_subbands(before, after)
        self.iterations.append(iteration)
        self.image_grids.append(img)
        self.update_grids.append(upd)
        return {
            "hf_update_share": high_frequency_share(upd),
            **{f"img_{i}{j}": float(img[i, j]) for i in range(self.block) for j in range(self.block)},
        }

    def image_series(self) -> np.ndarray:
        return np.array(self.image_grids)

    def update_series(self) -> np.ndarray:
        return np.array(self.update_grids)

    def mean_hf_update_share(self, count: int = 5) -> float:
        return float(np.mean([high_frequency_share(g, count) for g in self.update_grids]))


def iterations_to_fraction(series: np.ndarray, fraction: float = 0.9) -> int:
    """First index at which a trace has covered ``fraction`` of its start-to-end change."""
    series = np.asarray(series, dtype=np.float64)
    start, end = series[0], series[-1]
    span = end - start
    if span == 0:
        return 0
    progress = (series - start) / span
    hits = np.nonzero(progress >= fraction)[0]
    return int(hits[0])


def write_grid_csv(path, iterations, grids) -> None:
    """One row per iteration: iteration index followed by the B x B grid in row-major order."""
    grids = list(grids)
    if not grids:
        return
    h, w = grids[0].shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", *(f"s{i}{j}" for i in range(h) for j in range(w))])
        for it, g in zip(iterations, grids):
            out.writerow([it, *(repr(float(v)) for v in g.ravel())])
