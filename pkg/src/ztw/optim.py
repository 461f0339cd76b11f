"""Minibatch optimizers over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .exceptions import ConfigError


class Sgd:
    def __init__(self, params: list, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; state buffers keyed by parameter identity."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(kind: str, params: list, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8):
    if kind == "adam":
        return Adam(params, lr, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "sgd":
        return Sgd(params, lr)
    raise ConfigError(f"unknown optimizer kind {kind!r}")


def minibatches(n: int, batch_size: int, rng) -> list:
    """Shuffled index batches for one epoch, deterministic in the stream."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
