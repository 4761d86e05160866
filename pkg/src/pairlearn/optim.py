"""Stage schedule, cosine learning rate, decoupled-weight-decay Adam, EMA.

The stage schedule splits E epochs into a contrastive-only head, a middle
with both pair losses, and a distillation-only tail. The optimizer keeps
float64 moment estimates against float32 parameter storage and refuses to
apply a step containing non-finite gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, ParameterStore
from .tensor import GradientMap, Tensor


@dataclass(frozen=True)
class StageLosses:
    """Which pair losses are live in the current epoch."""

    cl_active: bool
    kl_active: bool


@dataclass(frozen=True)
class StageSchedule:
    """Epoch partition: first x% contrastive-only, last y% KL-only."""

    x: int
    y: int
    total_epochs: int

    def __post_init__(self):
        if not (0 <= self.x <= 100 and 0 <= self.y <= 100):
            raise ConfigError(f"stage percentages must be in [0, 100], got x={self.x} y={self.y}")
        if self.x + self.y > 100:
            raise ConfigError(f"stage percentages overlap: x={self.x} + y={self.y} > 100")
        if self.total_epochs < 1:
            raise ConfigError(f"total epochs must be positive, got {self.total_epochs}")

    @property
    def stage1_end(self) -> int:
        return (self.x * self.total_epochs) // 100

    @property
    def stage3_start(self) -> int:
        return self.total_epochs - (self.y * self.total_epochs) // 100


def stage_of(epoch: int, schedule: StageSchedule) -> StageLosses:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.stage1_end:
        return StageLosses(cl_active=True, kl_active=False)
    if epoch >= schedule.stage3_start:
        return StageLosses(cl_active=False, kl_active=True)
    return StageLosses(cl_active=True, kl_active=True)


def cosine_lr(step: int, total_steps: int, max_lr: float, min_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


class NonFiniteGradient(FloatingPointError):
    """An update was rejected because a gradient contained NaN or Inf."""


class AdamW:
    """Bias-corrected Adam with decoupled weight decay over a ParameterStore.

    Moments are float64; the update is computed in float64 and rounded
    into the float32 parameters. A non-finite gradient anywhere rejects
    the whole step before any state is touched.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: ParameterStore, max_lr: float, min_lr: float,
                 total_steps: int, weight_decay: float = 0.05):
        self.params = params
        self.max_lr = max_lr
        self.min_lr = min_lr
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {
            name: np.zeros(t.values.shape, dtype=np.float64) for name, t in params.items()
        }
        self.v: dict[str, np.ndarray] = {
            name: np.zeros(t.values.shape, dtype=np.float64) for name, t in params.items()
        }

    def lr_at(self, step: int) -> float:
        return cosine_lr(min(step, self.total_steps), self.total_steps, self.max_lr, self.min_lr)

    def step(self, grads: GradientMap, lr: float | None = None) -> float:
        """Apply one update; returns the learning rate used."""
        if lr is None:
            lr = self.lr_at(self.step_count)
        collected: dict[str, np.ndarray] = {}
        for name, t in self.params.items():
            g = grads.get(t)
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"gradient for {name!r} is not finite; step rejected")
            collected[name] = np.asarray(g, dtype=np.float64)
        self.step_count += 1
        k = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**k
        bc2 = 1.0 - b2**k
        for name, t in self.params.items():
            g = collected[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p64 = t.values.astype(np.float64)
            p64 -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p64)
            t.values[...] = p64.astype(np.float32)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for serialization."""
        out = {}
        for name in self.params.names():
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params.names():
            self.m[name][...] = arrays["m." + name]
            self.v[name][...] = arrays["v." + name]
        self.step_count = step_count


class Ema:
    """Shadow parameters updated as a ramped exponential moving average.

    The decay ramps as (1+step)/(10+step) capped at decay_max, so early
    steps track the live parameters closely and late steps average over a
    long horizon. ``decay`` overrides the ramp when given.
    """

    def __init__(self, params: ParameterStore, decay_max: float = 0.9995):
        self.params = params
        self.decay_max = decay_max
        self.shadow: dict[str, np.ndarray] = {
            name: t.values.astype(np.float64) for name, t in params.items()
        }

    def decay_at(self, step: int) -> float:
        return min(self.decay_max, (1 + step) / (10 + step))

    def update(self, step: int, decay: float | None = None) -> float:
        d = self.decay_at(step) if decay is None else decay
        for name, t in self.params.items():
            s = self.shadow[name]
            s *= d
            s += (1 - d) * t.values.astype(np.float64)
        return d

    def shadow_f32(self) -> dict[str, np.ndarray]:
        return {name: s.astype(np.float32) for name, s in self.shadow.items()}

    def swap_in(self) -> dict[str, np.ndarray]:
        """Load shadows into the live parameters; returns the saved values."""
        saved = self.params.value_dict()
        self.params.load_values(self.shadow_f32())
        return saved

    def swap_out(self, saved: dict[str, np.ndarray]) -> None:
        self.params.load_values(saved)

    def load_shadow(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params.names():
            self.shadow[name][...] = arrays[name]
