"""Input representations: event type, absolute time, mileage and rotary positions."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import EMBED_STD, Embedding, Module
from .tensor import Tensor

M_MAX = 300
THETA0 = 1e4


def mileage_index(m_km, m_max: int = M_MAX) -> np.ndarray:
    """Integer table row for each mileage: ``floor(m)`` clamped to ``m_max - 1``."""
    m = np.asarray(m_km, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mileage must be non-negative")
    return np.minimum(np.floor(m).astype(np.int64), m_max - 1)


def rope_rotate(x: Tensor, positions, theta0: float = THETA0) -> Tensor:
    return T.rope(x, np.asarray(positions), theta0)


def rope_matrix(position: int, dim: int, theta0: float = THETA0) -> np.ndarray:
    """Dense block-diagonal rotation acting on column vectors (for checks)."""
    ang = T.rope_angles(np.array(position), dim, theta0)
    r = np.zeros((dim, dim))
    for i, a in enumerate(ang):
        c, s = np.cos(a), np.sin(a)
        r[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
    return r


class TimeEmbedding(Module):
    """Row ``i`` is ``t'_i * w + b`` for the scaled time ``t'_i``."""

    def __init__(self, d: int):
        self.w = T.parameter(np.zeros(d))
        self.b = T.parameter(np.zeros(d))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.w.data[...] = rng.normal(0.0, EMBED_STD, self.w.shape)
        self.b.data[...] = 0.0

    def __call__(self, t_scaled) -> Tensor:
        t = Tensor(np.asarray(t_scaled, dtype=np.float64)[..., None])
        return T.add(T.mul(t, self.w), self.b)


class Embeddings(Module):
    def __init__(self, vocab_size: int, d: int, m_max: int = M_MAX):
        if d % 2:
            raise ValueError(f"model width must be even for rotary embeddings, got {d}")
        self.event = Embedding(vocab_size, d)
        self.time_emb = TimeEmbedding(d)
        self.mileage_table = Embedding(m_max, d)
        self.m_max = m_max

    def event_type(self, tokens) -> Tensor:
        return self.event(np.asarray(tokens))

    def time(self, t_scaled) -> Tensor:
        return self.time_emb(t_scaled)

    def mileage(self, m_km) -> Tensor:
        return self.mileage_table(mileage_index(m_km, self.m_max))

    def context(self, t_scaled, m_km) -> Tensor:
        return T.add(self.time(t_scaled), self.mileage(m_km))
