"""Per-image over-fitting loop: MSE to the raw image + L1, Adam, linear LR decay."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .network import WEIGHT_NAMES, ModelConfig, ModelState, backward, forward, init_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    initial_lr: float = 0.05
    l1_lambda: float = 1e-3
    seed: int = 0
    trace_every: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # loss is measured in 8-bit code values: MSE of (255 * restored, 255 * raw)
    value_range: float = 255.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")
        if self.trace_every is not None and self.trace_every < 1:
            raise ValueError("trace_every must be a positive integer")


@dataclass
class TraceRecord:
    iteration: int
    loss: float
    psnr: float
    subbands: dict[str, float] = field(default_factory=dict)


def lr_schedule(config: TrainConfig, iteration: int) -> float:
    if not 0 <= iteration < config.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.iterations})")
    return config.initial_lr * (1.0 - iteration / config.iterations)


def _psnr_unit(mse: float) -> float:
    return float("inf") if mse <= 0 else 10.0 * np.log10(1.0 / mse)


# observer(iteration, state_before_update, state_after_update, restored_before_update)
Observer = Callable[[int, ModelState, ModelState, np.ndarray], Optional[dict]]


def train_overfit(
    raw: np.ndarray,
    decoded: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    init_state: ModelState | None = None,
    observer: Observer | None = None,
) -> tuple[ModelState, list[TraceRecord]]:
    """Over-fit one image. ``raw`` and ``decoded`` are 1x3xHxW arrays in [0, 1].

    The observer, if given, is called after every update; a dict it returns is
    merged into the trace record of that iteration (when one is emitted).
    """
    if raw.shape != decoded.shape:
        raise T.ShapeError(f"raw {raw.shape} and decoded {decoded.shape} differ")
    state = init_state.copy() if init_state is not None else init_model(model_config, train_config.seed)
    hyper = dict(beta1=train_config.beta1, beta2=train_config.beta2, eps=train_config.adam_eps)
    for name, p in state.params.items():
        a = state.adam.get(name)
        if a is None or a.step == 0:
            state.adam[name] = T.AdamState.zeros_like(p, **hyper)
    trace: list[TraceRecord] = []
    lam = train_config.l1_lambda

    for it in range(train_config.iterations):
        restored, cache = forward(state, decoded)
        scale = train_config.value_range
        loss, g = T.mse_loss(restored * scale, raw * scale)
        g = g * scale
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}")
        grads = backward(state, cache, g)
        lr = lr_schedule(train_config, it)
        new_params, new_adam = {}, {}
        for name, p in state.params.items():
            gp = grads[name]
            if lam and name in WEIGHT_NAMES:
                gp = gp + T.l1_subgradient(p, lam)
            new_params[name], new_adam[name] = T.adam_step(p, gp, state.adam[name], lr)
        new_state = ModelState(state.config, new_params, new_adam)
        extra = observer(it, state, new_state, restored) if observer else None
        if train_config.trace_every and it % train_config.trace_every == 0:
            trace.append(TraceRecord(it, loss, _psnr_unit(loss / scale**2), dict(extra or {})))
        state = new_state

    return state, trace


def objective(
    state: ModelState, raw: np.ndarray, decoded: np.ndarray, lam: float, value_range: float = 255.0
) -> float:
    """Code-value MSE + lam * sum |w| over conv weights (the quantity the loop descends)."""
    restored, _ = forward(state, decoded)
    loss, _ = T.mse_loss(restored * value_range, raw * value_range)
    return loss + lam * sum(float(np.abs(state.params[n]).sum()) for n in WEIGHT_NAMES)


def write_trace_csv(path, trace: Iterable[TraceRecord]) -> None:
    trace = list(trace)
    extra = sorted({k for r in trace for k in r.subbands})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "psnr", *extra])
        for r in trace:
            w.writerow([r.iteration, repr(r.loss), repr(r.psnr), *(repr(r.subbands.get(k, "")) for k in extra)])
