"""SGD with momentum, L2 weight decay and a cosine-annealed step size."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class CosineSchedule:
    initial_rate: float
    total_steps: int
    min_rate: float = 0.0

    def rate(self, step):
        if self.total_steps <= 0:
            return self.initial_rate
        t = min(max(step, 0), self.total_steps)
        return self.min_rate + 0.5 * (self.initial_rate - self.min_rate) * (1 + math.cos(math.pi * t / self.total_steps))


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = False
    cosine: bool = True
    total_steps: int = 0  # 0: filled in by the training loop

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")

    def schedule(self, total_steps=None):
        total = self.total_steps or (total_steps or 0)
        if not self.cosine:
            return CosineSchedule(self.learning_rate, 0)
        return CosineSchedule(self.learning_rate, total)


class SGD:
    """Stochastic gradient descent over a fixed parameter list.

    Weight decay is added to the gradient before the momentum buffer, and
    the step size at ``step_index`` comes from the cosine schedule.
    """

    def __init__(self, params, config, total_steps=None):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.schedule = config.schedule(total_steps)
        self.buffers = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def lr(self, step_index):
        return self.schedule.rate(step_index)

    def step(self, step_index):
        cfg = self.config
        lr = self.lr(step_index)
        for i, p in enumerate(self.params):
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.momentum:
                buf = self.buffers[i]
                if buf is None:
                    buf = np.array(g, copy=True)
                else:
                    buf *= cfg.momentum
                    buf += g
                self.buffers[i] = buf
                g = g + cfg.momentum * buf if cfg.nesterov else buf
            p.data -= lr * g
        return lr


def sgd_step(params, config, step_index, state=None):
    """Functional single step; ``state`` is an :class:`SGD` carrying momentum buffers."""
    opt = state if state is not None else SGD(params, config)
    opt.step(step_index)
    return opt
