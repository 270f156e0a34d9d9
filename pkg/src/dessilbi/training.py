"""Mini-batch training loops shared by the experiment drivers.

All randomness (batch order) comes from the generator passed in, drawn
once per epoch, so a seed fixes the whole run.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .network import loss_and_grad
from .optimizer import dessilbi_step, sgd_step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")


def batches(n, batch_size, rng, shuffle=True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def dessilbi_epoch(net, state, data, cfg, alpha, rng, batch_size, shuffle=True):
    """One pass over ``data``; returns (state, sample-weighted mean loss)."""
    x, y = data
    total = 0.0
    for idx in batches(len(x), batch_size, rng, shuffle):
        loss, grads = loss_and_grad(net, state.params(), x[idx], y[idx])
        state = dessilbi_step(state, grads, cfg, alpha)
        total += loss * len(idx)
    return state, total / max(len(x), 1)


def sgd_epoch(net, params, buffers, data, lr, momentum, weight_decay, rng, batch_size,
              shuffle=True, post_step=None):
    x, y = data
    total = 0.0
    for idx in batches(len(x), batch_size, rng, shuffle):
        loss, grads = loss_and_grad(net, params, x[idx], y[idx])
        params, buffers = sgd_step(params, grads, lr, momentum, weight_decay, buffers)
        if post_step is not None:
            params = post_step(params)
        total += loss * len(idx)
    return params, buffers, total / max(len(x), 1)


def train_dessilbi(net, state, data, cfg, train_cfg, rng, on_epoch=None, start_epoch=0):
    """Run ``train_cfg.epochs`` epochs; ``on_epoch(epoch, state, loss)`` after each (1-based)."""
    for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
        state, loss = dessilbi_epoch(net, state, data, cfg, cfg.alpha(epoch), rng,
                                     train_cfg.batch_size, train_cfg.shuffle)
        if on_epoch is not None:
            on_epoch(epoch + 1, state, loss)
    return state


def train_sgd(net, params, data, cfg, train_cfg, rng, on_epoch=None, post_step=None,
              lr_scale=1.0):
    """Momentum SGD on the step-size schedule of ``cfg`` (lr = alpha(epoch) * lr_scale)."""
    buffers = None
    for epoch in range(train_cfg.epochs):
        params, buffers, loss = sgd_epoch(
            net, params, buffers, data, cfg.alpha(epoch) * lr_scale, cfg.momentum,
            cfg.weight_decay, rng, train_cfg.batch_size, train_cfg.shuffle, post_step)
        if on_epoch is not None:
            on_epoch(epoch + 1, params, loss)
    return params
