"""Initialisation, gradient clipping and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tape import ShapeError


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional stream path.

    Independent consumers (weight init, each task generator, ...) use
    distinct stream paths so adding one never shifts another.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot matrix of shape ``[fan_in, fan_out]``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"xavier_init needs positive fans, got fan_in={fan_in}, fan_out={fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def clip_gradients(grads: Mapping[str, np.ndarray], bound: float = 1.0) -> dict[str, np.ndarray]:
    """Elementwise clip of every gradient entry into ``[-bound, bound]``."""
    return {name: np.clip(g, -bound, bound) for name, g in grads.items()}


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates ``state`` and returns new params.

    Parameters without a gradient entry are returned unchanged (their moments
    are not advanced).
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has dims {list(g.shape)}, "
                             f"parameter has {list(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: moment for {name!r} has dims {list(m.shape)}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
