"""DCT-II kernel bank and the frequency-domain re-parameterization of conv kernels.

A kernel tensor ``K`` of shape (M, N, H, W) is written as

    K[m, n, h, w] = sum_ij V[m, n, i, j] * D[i, j, h, w]

where ``D`` is the orthonormal 2-D DCT-II basis. Training updates ``V``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class DctBank:
    height: int
    width: int
    kernels: np.ndarray  # (H, W, H, W) indexed [i, j, h, w]

    @property
    def matrix(self) -> np.ndarray:
        """Basis as an orthogonal (H*W, H*W) matrix, row = subband, column = tap."""
        return self.kernels.reshape(self.height * self.width, self.height * self.width)

    def kernel(self, i: int, j: int) -> np.ndarray:
        return self.kernels[i, j]


def dct_basis_1d(n: int) -> np.ndarray:
    """(n, n) orthonormal DCT-II matrix; row k is frequency k sampled at taps 0..n-1."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    c = np.where(k == 0, 1.0, np.sqrt(2.0))
    return c / np.sqrt(n) * np.cos((2 * t + 1) * k * np.pi / (2 * n))


@lru_cache(maxsize=None)
def build_dct_bank(height: int, width: int) -> DctBank:
    if height < 1 or width < 1:
        raise ValueError(f"kernel size must be positive, got {height}x{width}")
    bank = np.einsum("ih,jw->ijhw", dct_basis_1d(height), dct_basis_1d(width))
    bank.setflags(write=False)
    return DctBank(height, width, bank)


def _check(t: np.ndarray, bank: DctBank, what: str) -> None:
    if t.ndim != 4 or t.shape[2:] != (bank.height, bank.width):
        raise ShapeError(
            f"{what} shape {t.shape} does not match a {bank.height}x{bank.width} DCT bank"
        )


def reparameterize(v: np.ndarray, bank: DctBank) -> np.ndarray:
    """Synthesize spatial kernels from frequency coefficients."""
    _check(v, bank, "frequency weights")
    return np.einsum("mnij,ijhw->mnhw", v, bank.kernels, optimize=True)


def project_to_frequency(kernels: np.ndarray, bank: DctBank) -> np.ndarray:
    """Inner product of every (m, n) kernel with every basis kernel."""
    _check(kernels, bank, "kernels")
    return np.einsum("mnhw,ijhw->mnij", kernels, bank.kernels, optimize=True)


def far_gradient(grad_kernels: np.ndarray, bank: DctBank) -> np.ndarray:
    # K is linear in V with an orthonormal map, so the adjoint is the projection.
    return project_to_frequency(grad_kernels, bank)
