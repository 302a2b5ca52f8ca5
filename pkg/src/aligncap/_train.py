"""Optimizer steps, warmup schedule and mini-batch sampling shared by the trainers."""

from __future__ import annotations

import math

import numpy as np


class TrainingDiverged(RuntimeError):
    pass


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup over ``warmup_steps`` updates (step is 0-based), then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


class EpochSampler:
    """Seeded without-replacement batches; reshuffles at every epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < min(self.batch_size, self.n):
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(self.n)]
            out.append(self._order.pop())
        return out


class Optimizer:
    """Plain SGD, or AdamW with decoupled weight decay, over named arrays updated in place."""

    def __init__(self, kind: str = "sgd", weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.weight_decay, self.betas, self.eps = kind, weight_decay, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, slots: list[tuple[str, np.ndarray, np.ndarray]], lr: float) -> None:
        self.t += 1
        for name, param, grad in slots:
            if self.kind == "sgd":
                param -= lr * grad
                continue
            b1, b2 = self.betas
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            if self.weight_decay:
                param -= lr * self.weight_decay * param
            param -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_slots(slots, max_norm):
    if max_norm is None:
        return slots
    norm = math.sqrt(sum(float((g * g).sum()) for _, _, g in slots))
    if norm <= max_norm or norm == 0.0:
        return slots
    c = max_norm / norm
    return [(n, p, g * c) for n, p, g in slots]
