"""Right-padded mini-batches of event sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import PAD_ID, EventSequence, scale_time


@dataclass
class Batch:
    tokens: np.ndarray       # (B, L) int64, PAD_ID beyond each length
    t_hours: np.ndarray      # (B, L)
    m_km: np.ndarray         # (B, L)
    injected: np.ndarray     # (B, L) bool
    lengths: np.ndarray      # (B,)
    labels: np.ndarray | None = None  # (B, N) 0/1
    vehicle_ids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.lengths[:, None]

    def t_scaled(self, base: float) -> np.ndarray:
        return scale_time(self.t_hours, base)

    def last_time(self) -> np.ndarray:
        return self.t_hours[np.arange(self.size), self.lengths - 1]


def make_batch(seqs: Sequence[EventSequence], n_labels: int | None = None,
               width: int | None = None) -> Batch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if width is None else width
    if lengths.max() > width:
        raise ValueError(f"sequence of length {lengths.max()} exceeds batch width {width}")
    b = len(seqs)
    tokens = np.full((b, width), PAD_ID, dtype=np.int64)
    t = np.zeros((b, width))
    m = np.zeros((b, width))
    inj = np.zeros((b, width), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.tokens
        t[i, :n] = s.times
        m[i, :n] = s.mileage
        inj[i, :n] = s.injected
        # padding repeats the last time so scaled-time deltas stay finite
        t[i, n:] = t[i, n - 1]
        m[i, n:] = m[i, n - 1]
    labels = None
    if n_labels is not None:
        labels = np.stack([s.label_vector(n_labels) for s in seqs])
    return Batch(tokens, t, m, inj, lengths, labels, tuple(s.vehicle_id for s in seqs))
