"""Long-run frequency-behaviour experiment on a plain three-layer CNN.

Unlike the restoration network, the toy network maps the decoded image
directly to the raw one (no residual, no normalization):
conv -> ReLU -> conv -> ReLU -> conv.  It is trained with a small constant
Adam learning rate for many iterations so that the order in which
frequency subbands are fitted can be observed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .far import build_dct_bank, far_gradient, reparameterize
from .network import ModelConfig, ModelState, init_model
from .trainer import Observer, TraceRecord, TrainingDiverged, _psnr_unit


@dataclass(frozen=True)
class ToyConfig:
    channels: int = 64
    iterations: int = 5000
    lr: float = 1e-5
    kernel_size: int = 3
    parameterization: str = "far"
    seed: int = 0
    trace_every: Optional[int] = 50

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.channels, self.kernel_size, scales=1, parameterization=self.parameterization)


def _kernels(state: ModelState) -> dict[str, np.ndarray]:
    if state.config.parameterization != "far":
        return {n: state.params[n] for n in ("w1", "w2", "w3")}
    bank = build_dct_bank(state.config.kernel_size, state.config.kernel_size)
    return {n: reparameterize(state.params[n], bank) for n in ("w1", "w2", "w3")}


def toy_forward(state: ModelState, x: np.ndarray):
    k, p = _kernels(state), state.params
    a1 = T.conv2d_forward(x, k["w1"], p["b1"])
    h1, m1 = T.relu_forward(a1)
    a2 = T.conv2d_forward(h1, k["w2"], p["b2"])
    h2, m2 = T.relu_forward(a2)
    out = T.conv2d_forward(h2, k["w3"], p["b3"])
    return out, (x, h1, m1, h2, m2, k)


def toy_backward(state: ModelState, cache, grad: np.ndarray) -> dict[str, np.ndarray]:
    x, h1, m1, h2, m2, k = cache
    g2, gk3, gb3 = T.conv2d_backward(h2, k["w3"], grad)
    g1, gk2, gb2 = T.conv2d_backward(h1, k["w2"], T.relu_backward(m2, g2))
    _, gk1, gb1 = T.conv2d_backward(x, k["w1"], T.relu_backward(m1, g1), need_input_grad=False)
    grads = {"w1": gk1, "b1": gb1, "w2": gk2, "b2": gb2, "w3": gk3, "b3": gb3}
    if state.config.parameterization == "far":
        bank = build_dct_bank(state.config.kernel_size, state.config.kernel_size)
        for n in ("w1", "w2", "w3"):
            grads[n] = far_gradient(grads[n], bank)
    return grads


def train_toy(raw: np.ndarray, decoded: np.ndarray, config: ToyConfig, observer: Observer | None = None):
    """Over-fit the toy network (decoded -> raw) with constant-lr Adam; returns (state, trace)."""
    if raw.shape != decoded.shape:
        raise T.ShapeError(f"raw {raw.shape} and decoded {decoded.shape} differ")
    state = init_model(config.model_config(), config.seed)
    trace: list[TraceRecord] = []
    for it in range(config.iterations):
        out, cache = toy_forward(state, decoded)
        loss, g = T.mse_loss(out, raw)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}")
        grads = toy_backward(state, cache, g)
        new_params, new_adam = {}, {}
        for name, p in state.params.items():
            new_params[name], new_adam[name] = T.adam_step(p, grads[name], state.adam[name], config.lr)
        new_state = ModelState(state.config, new_params, new_adam)
        extra = observer(it, state, new_state, np.clip(out, 0.0, 1.0)) if observer else None
        if config.trace_every and it % config.trace_every == 0:
            trace.append(TraceRecord(it, loss, _psnr_unit(loss), dict(extra or {})))
        state = new_state
    return state, trace
