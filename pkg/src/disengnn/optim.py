"""Seeded random streams, Gaussian initialisation and Adam with step decay."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, get_default_dtype

INIT_STD = 0.1


def make_rng(seed: int, stream: str = "init", *keys: int) -> np.random.Generator:
    """Independent generator for a named substream of ``seed``.

    Stream names are hashed with crc32 so that the mapping is stable across
    interpreter runs (``hash()`` of a str is salted).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode()), *[int(k) for k in keys]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def gaussian_init(shape, rng: np.random.Generator, std: float = INIT_STD, dtype=None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("gaussian_init needs a non-empty shape")
    # draw in float64 then cast, so 32/64-bit runs start from the same values
    values = rng.normal(0.0, std, size=shape)
    return Tensor(values.astype(dtype or get_default_dtype()), requires_grad=True)


def step_decay_lr(base_lr: float, decay_rate: float, decay_every: int, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * decay_rate ** (epoch // decay_every)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    base_lr: float = 0.005
    decay_rate: float = 0.1
    decay_every: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_weight: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, epoch: int) -> float:
        return step_decay_lr(self.base_lr, self.decay_rate, self.decay_every, epoch)


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    epoch: int,
    decay: Mapping[str, bool] | None = None,
) -> None:
    """In-place Adam update of ``params``.

    ``decay[name]`` selects which tensors receive the L2 term ``l2_weight * w``
    in their gradient; by default every tensor with ndim >= 2.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")

    lr = state.lr(epoch)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        use_l2 = decay[name] if decay is not None else p.ndim >= 2
        if use_l2 and state.l2_weight:
            g = g + state.l2_weight * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.data -= update.astype(p.dtype)

