"""Minimal Adam loop for fine-tuning the toy model on a selected subset.

Deterministic under the config seed (fixed shuffling, fixed reduction
order). A divergence guard aborts if the batch loss exceeds 10x the first
batch's loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, TrainingDivergedError
from .model import ParamSet, backward, forward, zeros_like_params

DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0:
            raise DataError("learning rate, batch size and steps must be non-negative/positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise DataError("adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise DataError("adam eps must be positive")


def adam_step(value, grad, m, v, t, cfg: TrainConfig):
    """One Adam update; mutates m and v, returns the new value."""
    m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    return value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def train(params: ParamSet, data, cfg: TrainConfig, history: list | None = None) -> ParamSet:
    """Adam for cfg.steps over shuffled batches; returns new parameters."""
    if not data:
        raise DataError("training data is empty")
    params = params.copy()
    named = dict(params.iter_named())
    m_state = {k: np.zeros_like(a) for k, a in named.items()}
    v_state = {k: np.zeros_like(a) for k, a in named.items()}
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    initial_loss = None
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = [int(i) for i in rng.permutation(len(data))]
            batch.append(data[order.pop()])
        grads = zeros_like_params(params)
        gnamed = dict(grads.iter_named())
        batch_loss = 0.0
        for seq in batch:
            loss, cache = forward(params, seq)
            g, _ = backward(params, cache)
            batch_loss += loss
            for name, arr in g.iter_named():
                gnamed[name] += arr
        batch_loss /= cfg.batch_size
        if initial_loss is None:
            initial_loss = batch_loss
        if batch_loss > DIVERGENCE_FACTOR * max(initial_loss, 1e-12):
            raise TrainingDivergedError(
                f"loss {batch_loss:.4g} exceeded {DIVERGENCE_FACTOR}x initial "
                f"{initial_loss:.4g} at step {step}"
            )
        if history is not None:
            history.append((step, batch_loss))
        for name, arr in named.items():
            arr[...] = adam_step(arr, gnamed[name] / cfg.batch_size,
                                 m_state[name], v_state[name], step, cfg)
    return params


def eval_loss(params: ParamSet, sequences) -> float:
    """Mean per-sequence next-token loss; exact (order-invariant) summation."""
    seqs = sequences.sequences if hasattr(sequences, "sequences") else sequences
    if not seqs:
        raise DataError("evaluation set is empty")
    losses = [forward(params, seq)[0] for seq in seqs]
    return math.fsum(losses) / len(losses)


def write_training_curve(path, history, fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fingerprint:
            fh.write(f"# config_fingerprint={fingerprint}\n")
        fh.write("step,loss\n")
        for step, loss in history:
            fh.write(f"{step},{loss:.17g}\n")
