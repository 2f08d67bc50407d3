"""Dense (batch, channel, height, width) numeric kernels with hand-written backward passes.

Everything operates on float64 numpy arrays. Convolution kernels use the
(in_channels, out_channels, kh, kw) layout and stride-1 "same" zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _check4(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, height, width), got shape {x.shape}")


# --------------------------------------------------------------------------- conv


# Taps are evaluated on the flattened zero-padded image: with row pitch
# P = X + kw - 1, the window of tap (h, w) for every output position is the
# contiguous range [h*P + w, h*P + w + Y*P). Outputs computed on that
# padded grid carry kw - 1 junk columns per row, which are sliced away.


def _padded_flat(x2: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(M, Y, X) -> (M, (Y + kh) * P) with one spare row so every tap range is in bounds."""
    m, ny, nx = x2.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((m, ny + kh, nx + kw - 1))
    xp[:, ph:ph + ny, pw:pw + nx] = x2
    return xp.reshape(m, -1)


def _tap_offsets(kh: int, kw: int, pitch: int):
    for h in range(kh):
        for w in range(kw):
            yield h, w, h * pitch + w


def _check_conv(x: np.ndarray, kernels: np.ndarray) -> None:
    _check4("input", x)
    _check4("kernels", kernels)
    m, _, kh, kw = kernels.shape
    if x.shape[1] != m:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect M={m} (kernels shape {kernels.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate ``x`` (B, M, Y, X) with ``kernels`` (M, N, kh, kw), zero 'same' padding."""
    _check_conv(x, kernels)
    m, n, kh, kw = kernels.shape
    b, _, ny, nx = x.shape
    pitch = nx + kw - 1
    span = ny * pitch
    taps = np.ascontiguousarray(kernels.transpose(2, 3, 1, 0))  # (kh, kw, N, M)
    out = np.empty((b, n, ny, nx))
    for bi in range(b):
        flat = _padded_flat(x[bi], kh, kw)
        acc = np.zeros((n, span))
        for h, w, off in _tap_offsets(kh, kw, pitch):
            acc += taps[h, w] @ flat[:, off:off + span]
        out[bi] = acc.reshape(n, ny, pitch)[:, :, :nx]
    if bias is not None:
        bias = np.asarray(bias).reshape(-1)
        if bias.shape[0] != n:
            raise ShapeError(f"bias has {bias.shape[0]} entries, expected N={n}")
        out += bias[None, :, None, None]
    return out


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, grad_output: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_output * conv2d_forward(x, kernels, bias))``.

    Returns ``(grad_input, grad_kernels, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false.
    """
    _check_conv(x, kernels)
    _check4("grad_output", grad_output)
    m, n, kh, kw = kernels.shape
    b, _, ny, nx = x.shape
    if grad_output.shape != (b, n, ny, nx):
        raise ShapeError(
            f"inconsistent shapes: input {x.shape}, kernels {kernels.shape}, grad_output {grad_output.shape}"
        )
    pitch = nx + kw - 1
    span = ny * pitch
    ph, pw = kh // 2, kw // 2
    taps = np.ascontiguousarray(kernels.transpose(2, 3, 0, 1))  # (kh, kw, M, N)
    gk = np.zeros((kh, kw, m, n))
    gx = np.empty(x.shape) if need_input_grad else None
    for bi in range(b):
        flat = _padded_flat(x[bi], kh, kw)
        g = np.zeros((n, ny, pitch))
        g[:, :, :nx] = grad_output[bi]
        g = g.reshape(n, span)
        gflat = np.zeros_like(flat) if need_input_grad else None
        for h, w, off in _tap_offsets(kh, kw, pitch):
            gk[h, w] += flat[:, off:off + span] @ g.T
            if need_input_grad:
                gflat[:, off:off + span] += taps[h, w] @ g
        if need_input_grad:
            gx[bi] = gflat.reshape(m, ny + kh, pitch)[:, ph:ph + ny, pw:pw + nx]
    return gx, gk.transpose(2, 3, 0, 1).copy(), grad_output.sum(axis=(0, 2, 3))


# ------------------------------------------------------------------ instance norm


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (B, C, 1, 1)
    var: np.ndarray  # (B, C, 1, 1)
    eps: float


def instance_norm_forward(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, NormStats]:
    """Affine-free instance normalization over the spatial axes of every (batch, channel) slice."""
    _check4("input", x)
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("instance norm needs a non-empty spatial extent")
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = ((x - mean) ** 2).mean(axis=(2, 3), keepdims=True)
    out = (x - mean) / np.sqrt(var + eps)
    return out, NormStats(mean, var, eps)


def instance_norm_backward(saved: NormStats, x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(saved.var + saved.eps)
    xhat = (x - saved.mean) * inv
    g_mean = grad_output.mean(axis=(2, 3), keepdims=True)
    gx_mean = (grad_output * xhat).mean(axis=(2, 3), keepdims=True)
    return inv * (grad_output - g_mean - xhat * gx_mean)


# ------------------------------------------------------------------------- relu


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    return grad_output * mask


# --------------------------------------------------------------------- resample


def _bilinear_matrix(n_in: int) -> np.ndarray:
    """(2*n_in, n_in) 1-D linear interpolation matrix, half-pixel (align_corners=False) grid."""
    n_out = 2 * n_in
    a = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / 2.0 - 0.5
        src = max(src, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        a[o, i0] += 1.0 - t
        a[o, i1] += t
    return a


_UP_CACHE: dict[int, np.ndarray] = {}


def _up_matrix(n: int) -> np.ndarray:
    mat = _UP_CACHE.get(n)
    if mat is None:
        mat = _bilinear_matrix(n)
        mat.setflags(write=False)
        _UP_CACHE[n] = mat
    return mat


def resample(x: np.ndarray, mode: str) -> np.ndarray:
    """``down2``: 2x2 mean pooling. ``up2``: bilinear 2x upsampling (align_corners=False)."""
    _check4("input", x)
    b, c, ny, nx = x.shape
    if mode == "down2":
        if ny % 2 or nx % 2:
            raise ShapeError(f"down2 needs even spatial extents, got {ny}x{nx}")
        return x.reshape(b, c, ny // 2, 2, nx // 2, 2).mean(axis=(3, 5))
    if mode == "up2":
        ay, ax = _up_matrix(ny), _up_matrix(nx)
        return np.einsum("py,bcyx,qx->bcpq", ay, x, ax, optimize=True)
    raise ValueError(f"unknown resample mode {mode!r}")


def resample_backward(grad_output: np.ndarray, mode: str) -> np.ndarray:
    """Transpose of :func:`resample` applied to ``grad_output``."""
    _check4("grad_output", grad_output)
    b, c, ny, nx = grad_output.shape
    if mode == "down2":
        g = np.repeat(np.repeat(grad_output, 2, axis=2), 2, axis=3)
        return g / 4.0
    if mode == "up2":
        if ny % 2 or nx % 2:
            raise ShapeError(f"up2 gradient must have even extents, got {ny}x{nx}")
        ay, ax = _up_matrix(ny // 2), _up_matrix(nx // 2)
        return np.einsum("py,bcpq,qx->bcyx", ay, grad_output, ax, optimize=True)
    raise ValueError(f"unknown resample mode {mode!r}")


# ------------------------------------------------------------------------- loss


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} differ")
    diff = prediction - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def l1_subgradient(params: np.ndarray, lam: float) -> np.ndarray:
    """``lam * sign(params)`` with sign(0) = 0."""
    return lam * np.sign(params)


# ------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, p: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, learning_rate: float
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"params {params.shape}, grads {grads.shape}, moments {state.m.shape} disagree")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)
