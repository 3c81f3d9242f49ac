"""Adam with a bias-correction toggle, polynomial-decay schedule with warmup, clipping.

Standard fine-tuning runs Adam without bias correction; Standard++ switches it on
and trains longer. Both axes are independent config fields.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_updates: int
    total_updates: int
    power: float = 1.0
    end_lr: float = 0.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_updates == 0 and self.total_updates == 0:
            raise ConfigError("schedule needs warmup_updates or total_updates > 0")
        if not 0 <= self.warmup_updates <= self.total_updates:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_updates}) <= total ({self.total_updates})")

    @classmethod
    def from_fraction(cls, peak_lr: float, total_updates: int, warmup_fraction: float = 0.06,
                      power: float = 1.0, end_lr: float = 0.0) -> "Schedule":
        return cls(peak_lr, int(round(warmup_fraction * total_updates)), total_updates, power, end_lr)


def lr_at(schedule: Schedule, t: int) -> float:
    """Learning rate for update index t (1-based)"""
    if t < 1:
        raise ValueError(f"update index starts at 1, got {t}")
    s = schedule
    if t <= s.warmup_updates:
        return s.peak_lr * t / s.warmup_updates
    if t <= s.total_updates:
        remaining = (s.total_updates - t) / (s.total_updates - s.warmup_updates)
        return s.end_lr + (s.peak_lr - s.end_lr) * remaining ** s.power
    return s.end_lr


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-6
    bias_correction: bool = True
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], **hyper: Any) -> "AdamState":
        return cls(m={k: np.zeros_like(p.values) for k, p in params.items()},
                   v={k: np.zeros_like(p.values) for k, p in params.items()}, **hyper)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One in-place Adam update with decoupled weight decay"""
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if state.bias_correction:
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
        else:
            m_hat, v_hat = m, v
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
        p.values = p.values - update - lr * state.weight_decay * p.values


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scales all gradients jointly so the global L2 norm is at most max_norm"""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


class Adam:
    """Adam over a named parameter set, driven by a Schedule"""

    def __init__(self, params: Dict[str, Tensor], schedule: Schedule, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-6, weight_decay: float = 0.01, bias_correction: bool = True,
                 clip_norm: float = 0.0):
        self.params = params
        self.schedule = schedule
        self.clip_norm = clip_norm
        self.state = AdamState.for_params(params, beta1=beta1, beta2=beta2, eps_adam=eps,
                                          weight_decay=weight_decay, bias_correction=bias_correction)
        self.last_grad_norm: float | None = None

    @classmethod
    def from_config(cls, params: Dict[str, Tensor], optim: Dict[str, Any]) -> "Adam":
        schedule = Schedule.from_fraction(optim["lr"], optim["total_updates"], optim["warmup_fraction"],
                                          optim["power"], optim["end_lr"])
        return cls(params, schedule, beta1=optim["beta1"], beta2=optim["beta2"], eps=optim["eps"],
                   weight_decay=optim["weight_decay"], bias_correction=optim["bias_correction"],
                   clip_norm=optim["clip_norm"])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip_norm > 0:
            grads, self.last_grad_norm = clip_gradients(grads, self.clip_norm)
        lr = lr_at(self.schedule, self.state.step + 1)
        adam_step(self.params, grads, self.state, lr)
        return lr
