"""AdamW over named parameter groups, each with its own learning rate and decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    clamp_min: float | None = None
    base_lr: float = field(init=False)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"group {self.name!r}: lr and weight decay must be >= 0")
        self.base_lr = self.lr


class AdamW:
    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [g for g in groups if g.params]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}
        self._v = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}

    def group(self, name: str) -> ParamGroup | None:
        return next((g for g in self.groups if g.name == name), None)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()

    def set_lr_factor(self, factor: float) -> None:
        for g in self.groups:
            g.lr = g.base_lr * factor

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for g in self.groups:
            for p in g.params:
                grad = p.grad
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f"non-finite gradient in group {g.name!r}, tensor {p.name or p.shape}")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                if g.lr == 0:
                    continue
                if g.weight_decay:
                    p.data *= 1 - g.lr * g.weight_decay
                p.data -= g.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if g.clamp_min is not None:
                    np.maximum(p.data, g.clamp_min, out=p.data)


def cosine_factor(step: int, total: int) -> float:
    if total <= 0:
        return 1.0
    return 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
