"""Multi-scale residual restoration network with a shared three-layer bulk.

For every pyramid level s the decoded image is mean-pooled s times, passed
through conv -> IN -> ReLU -> conv -> IN -> ReLU -> conv (same weights at
every level), bilinearly upsampled back, and the per-level outputs are
averaged into a residual that is added to the decoded image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .far import build_dct_bank, far_gradient, project_to_frequency, reparameterize

Parameterization = Literal["far", "vanilla"]
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
WEIGHT_NAMES = ("w1", "w2", "w3")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    kernel_size: int = 3
    scales: int = 3
    parameterization: Parameterization = "far"
    in_channels: int = 3
    out_channels: int = 3
    norm_eps: float = 1e-5
    # bulk output is expressed in 8-bit code values
    residual_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.parameterization not in ("far", "vanilla"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        k, n = self.kernel_size, self.channels
        return {
            "w1": (self.in_channels, n, k, k),
            "b1": (n,),
            "w2": (n, n, k, k),
            "b2": (n,),
            "w3": (n, self.out_channels, k, k),
            "b3": (self.out_channels,),
        }

    def parameter_count(self) -> int:
        k2, n = self.kernel_size**2, self.channels
        return self.in_channels * n * k2 + n + n * n * k2 + n + n * self.out_channels * k2 + self.out_channels

    @property
    def multiple(self) -> int:
        return 2 ** (self.scales - 1)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: dict[str, T.AdamState] = field(default_factory=dict)

    def kernels(self) -> dict[str, np.ndarray]:
        """Spatial kernels for every conv layer (synthesized from V under FAR)."""
        if self.config.parameterization == "vanilla":
            return {name: self.params[name] for name in WEIGHT_NAMES}
        bank = build_dct_bank(self.config.kernel_size, self.config.kernel_size)
        return {name: reparameterize(self.params[name], bank) for name in WEIGHT_NAMES}

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: a.copy() for k, a in self.adam.items()},
        )

    def with_params(self, params: dict[str, np.ndarray]) -> "ModelState":
        shapes = self.config.layer_shapes()
        fixed = {}
        for name in PARAM_NAMES:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.size != int(np.prod(shapes[name])):
                raise T.ShapeError(f"{name}: {arr.shape} cannot hold {shapes[name]}")
            fixed[name] = arr.reshape(shapes[name]).copy()
        return ModelState(self.config, fixed, {k: a.copy() for k, a in self.adam.items()})


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Fan-in scaled uniform kernels; FAR stores the projection of the very same kernels."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in config.layer_shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0] * shape[2] * shape[3]
        bound = np.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    if config.parameterization == "far":
        bank = build_dct_bank(config.kernel_size, config.kernel_size)
        for name in WEIGHT_NAMES:
            params[name] = project_to_frequency(params[name], bank)
    adam = {name: T.AdamState.zeros_like(p) for name, p in params.items()}
    return ModelState(config, params, adam)


def _check_input(config: ModelConfig, decoded: np.ndarray) -> None:
    if decoded.ndim != 4 or decoded.shape[0] != 1 or decoded.shape[1] != config.in_channels:
        raise T.ShapeError(f"expected a 1x{config.in_channels}xHxW image, got {decoded.shape}")
    mult = config.multiple
    h, w = decoded.shape[2:]
    if h % mult or w % mult:
        raise T.ShapeError(
            f"spatial size {h}x{w} is not divisible by {mult} for {config.scales} scales; "
            f"reflect-pad with pad_to_multiple(image, {mult}) first"
        )


def _bulk_forward(kernels, params, x, eps):
    z1 = T.conv2d_forward(x, kernels["w1"], params["b1"])
    n1, s1 = T.instance_norm_forward(z1, eps)
    a1, m1 = T.relu_forward(n1)
    z2 = T.conv2d_forward(a1, kernels["w2"], params["b2"])
    n2, s2 = T.instance_norm_forward(z2, eps)
    a2, m2 = T.relu_forward(n2)
    r = T.conv2d_forward(a2, kernels["w3"], params["b3"])
    return r, (x, z1, s1, m1, a1, z2, s2, m2, a2)


def _bulk_backward(kernels, cache, g):
    x, z1, s1, m1, a1, z2, s2, m2, a2 = cache
    ga2, gk3, gb3 = T.conv2d_backward(a2, kernels["w3"], g)
    gz2 = T.instance_norm_backward(s2, z2, T.relu_backward(m2, ga2))
    ga1, gk2, gb2 = T.conv2d_backward(a1, kernels["w2"], gz2)
    gz1 = T.instance_norm_backward(s1, z1, T.relu_backward(m1, ga1))
    _, gk1, gb1 = T.conv2d_backward(x, kernels["w1"], gz1, need_input_grad=False)
    return {"w1": gk1, "b1": gb1, "w2": gk2, "b2": gb2, "w3": gk3, "b3": gb3}


@dataclass
class ForwardCache:
    kernels: dict[str, np.ndarray]
    bulk: list
    pre_clamp: np.ndarray


def forward(state: ModelState, decoded: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    cfg = state.config
    _check_input(cfg, decoded)
    kernels = state.kernels()
    residual = np.zeros_like(decoded, dtype=np.float64)
    caches = []
    x = decoded.astype(np.float64)
    for s in range(cfg.scales):
        if s:
            x = T.resample(x, "down2")
        r, cache = _bulk_forward(kernels, state.params, x, cfg.norm_eps)
        caches.append(cache)
        for _ in range(s):
            r = T.resample(r, "up2")
        residual += r
    residual *= cfg.residual_scale / cfg.scales
    pre = decoded + residual
    return np.clip(pre, 0.0, 1.0), ForwardCache(kernels, caches, pre)


def backward(state: ModelState, cache: ForwardCache, grad_restored: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor in ``state.params`` (V under FAR)."""
    cfg = state.config
    pre = cache.pre_clamp
    g_res = np.where((pre >= 0.0) & (pre <= 1.0), grad_restored, 0.0) * (cfg.residual_scale / cfg.scales)
    grads = {name: np.zeros(shape) for name, shape in cfg.layer_shapes().items()}
    for s, bulk_cache in enumerate(cache.bulk):
        g = g_res
        for _ in range(s):
            g = T.resample_backward(g, "up2")
        for name, gv in _bulk_backward(cache.kernels, bulk_cache, g).items():
            grads[name] += gv
    if cfg.parameterization == "far":
        bank = build_dct_bank(cfg.kernel_size, cfg.kernel_size)
        for name in WEIGHT_NAMES:
            grads[name] = far_gradient(grads[name], bank)
    return grads


def restore(state: ModelState, decoded: np.ndarray) -> np.ndarray:
    """Forward pass on an arbitrary-size image: reflect-pad, run, crop."""
    padded, (h, w) = pad_to_multiple(decoded, state.config.multiple)
    out, _ = forward(state, padded)
    return out[:, :, :h, :w]


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > multiple else "edge")
    return image, (h, w)
