"""EPredictor: causal decoder over CarFormer hidden states.

After every observed event ``i >= c`` it emits multi-label error-pattern
probabilities and a scaled time-to-occurrence. Layer 1 is causal self
attention over the decoder stream; layer 2 takes some of its query, key and
value inputs from the encoder memory, depending on the variant.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .batch import Batch
from .embeddings import THETA0
from .events import scale_time, unscale_time
from .layers import (MLP, DepthwiseConv, FeedForward, Linear, Module, RMSNorm, attend, causal_mask,
                     init_weights, merge_heads, scores, split_heads)
from .tensor import Tensor

PROB_EPS = 1e-7


class InsufficientContextError(ValueError):
    """Raised when a sequence is shorter than the minimum context."""


@dataclass(frozen=True)
class VariantSpec:
    cross: tuple[str, ...] = ()        # layer-2 roles read from the encoder memory
    ce_layers: tuple[int, ...] = ()    # 1-based layers whose Q, K get CE added
    rope: bool = False
    scaled: bool = False               # sqrt(3 d_head) in every layer
    speed: bool = False                # relative speed bias in every layer
    mixffn: bool = False
    add_time: bool = False


EP_VARIANTS: dict[str, VariantSpec] = {
    "rotcross-query-key-ce-1-2": VariantSpec(("query", "key"), (1, 2), rope=True),
    "rotcross-query-key-ce-2": VariantSpec(("query", "key"), (2,), rope=True),
    "rotcross-query-ce-2": VariantSpec(("query",), (2,), rope=True),
    "rotcross-key-value-ce-2": VariantSpec(("key", "value"), (2,), rope=True),
    "rotcross-key-value-scaled-ce-2": VariantSpec(("key", "value"), (2,), rope=True, scaled=True),
    "rotnocross-ce-1-2": VariantSpec((), (1, 2), rope=True),
    "cross-speed": VariantSpec(("key", "value"), speed=True),
    "cross-mixffn": VariantSpec(("key", "value"), mixffn=True),
    "time-cross-query": VariantSpec(("query",), add_time=True),
}


@dataclass
class EPredictorConfig:
    d_model: int = 64
    n_heads: int = 4
    n_labels: int = 12
    min_context: int = 8
    gamma: float = 1.0
    time_base: float = 30.0
    threshold: float = 0.7
    variant: str = "rotcross-key-value-ce-2"
    ffn_mult: int = 2
    theta0: float = THETA0
    rms_eps: float = 1e-6
    freeze_backbone: bool = True
    n_layers: int = field(default=2, init=False)

    def __post_init__(self):
        if self.variant not in EP_VARIANTS:
            raise ValueError(f"unknown EPredictor variant {self.variant!r}; choose from {sorted(EP_VARIANTS)}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_context < 1:
            raise ValueError("min_context must be positive")

    @classmethod
    def full_scale(cls, n_labels: int = 73) -> EPredictorConfig:
        return cls(d_model=600, n_heads=12, n_labels=n_labels, min_context=30)

    @property
    def spec(self) -> VariantSpec:
        return EP_VARIANTS[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("n_layers")
        return d


@dataclass
class EPOutput:
    logits: Tensor    # (B, L, N)
    probs: Tensor     # (B, L, N)
    dt_pred: Tensor   # (B, L)


def speed_bias(t_hours, m_km) -> np.ndarray:
    """``S_rel[..., i, j] = s_i - s_j`` with ``s = m / t`` and ``s = 0`` where ``t = 0``."""
    t = np.asarray(t_hours, dtype=np.float64)
    m = np.asarray(m_km, dtype=np.float64)
    s = np.divide(m, t, out=np.zeros(np.broadcast(t, m).shape), where=t != 0)
    return s[..., :, None] - s[..., None, :]


class MixFFN(Module):
    """Linear -> depthwise causal conv (k=3) -> GELU -> Linear over the mileage embedding."""

    def __init__(self, d: int, kernel: int = 3):
        self.fc1 = Linear(d, d)
        self.conv = DepthwiseConv(d, kernel, causal=True)
        self.fc2 = Linear(d, d)

    def __call__(self, m: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.conv(self.fc1(m))))


class DecoderLayer(Module):
    def __init__(self, cfg: EPredictorConfig, index: int):
        d = cfg.d_model
        self.wq = Linear(d, d, bias=False)
        self.wk = Linear(d, d, bias=False)
        self.wv = Linear(d, d, bias=False)
        self.wo = Linear(d, d)
        self.norm1 = RMSNorm(d, cfg.rms_eps)
        self.ffn = FeedForward(d, cfg.ffn_mult * d)
        self.norm2 = RMSNorm(d, cfg.rms_eps)
        self.cfg = cfg
        self.index = index

    def __call__(self, x: Tensor, memory: Tensor, ce: Tensor, bias: np.ndarray | None,
                 positions: np.ndarray, mask: np.ndarray) -> Tensor:
        spec, h = self.cfg.spec, self.cfg.n_heads
        cross = spec.cross if self.index == 2 else ()
        q = self.wq(memory if "query" in cross else x)
        k = self.wk(memory if "key" in cross else x)
        v = self.wv(memory if "value" in cross else x)
        if self.index in spec.ce_layers:
            q, k = T.add(q, ce), T.add(k, ce)
        q, k, v = split_heads(q, h), split_heads(k, h), split_heads(v, h)
        if spec.rope:
            q = T.rope(q, positions, self.cfg.theta0)
            k = T.rope(k, positions, self.cfg.theta0)
        raw = scores(q, k)
        factor = 1.0
        if spec.speed:
            raw = T.add(raw, Tensor(bias[:, None]))
            factor = 2.0
        if spec.scaled:
            factor = 3.0
        ctx = merge_heads(attend(raw, v, mask, factor))
        x1 = self.norm1(T.add(x, self.wo(ctx)))
        return self.norm2(T.add(x1, self.ffn(x1)))


class EPredictor(Module):
    def __init__(self, cfg: EPredictorConfig, seed: int = 0):
        self.cfg = cfg
        d = cfg.d_model
        if cfg.spec.mixffn:
            self.mixffn = MixFFN(d)
        self.layers = [DecoderLayer(cfg, 1), DecoderLayer(cfg, 2)]
        self.head_c = MLP(d, cfg.ffn_mult * d, cfg.n_labels)
        self.head_t = MLP(d, cfg.ffn_mult * d, 1)
        init_weights(self, np.random.default_rng(seed), cfg.n_layers)

    def forward(self, h_enc, time_emb, mileage_emb, t_hours, m_km, memory=None) -> EPOutput:
        """Decode encoder states (B, L, d).

        ``memory`` is what the cross-attention layer reads; it defaults to
        ``h_enc``. Passing zeros here ablates the cross path only.
        """
        h_enc, time_emb, mileage_emb = (T.as_tensor(a) for a in (h_enc, time_emb, mileage_emb))
        memory = h_enc if memory is None else T.as_tensor(memory)
        if not (h_enc.shape == time_emb.shape == mileage_emb.shape == memory.shape):
            raise ValueError(f"encoder/decoder shape mismatch: H {h_enc.shape}, T {time_emb.shape}, "
                             f"M {mileage_emb.shape}, memory {memory.shape}")
        t_hours = np.atleast_2d(t_hours)
        m_km = np.atleast_2d(m_km)
        length = h_enc.shape[1]
        if t_hours.shape[-1] != length:
            raise ValueError(f"encoder length {length} does not match {t_hours.shape[-1]} events")
        spec = self.cfg.spec
        x = h_enc
        if spec.add_time:
            x = T.add(x, time_emb)
        if spec.mixffn:
            x = T.add(x, self.mixffn(mileage_emb))
        ce = T.add(time_emb, mileage_emb)
        bias = speed_bias(t_hours, m_km) if spec.speed else None
        positions = np.arange(length)
        mask = causal_mask(length)
        for layer in self.layers:
            x = layer(x, memory, ce, bias, positions, mask)
        logits = self.head_c(x)
        dt = T.reshape(self.head_t(x), x.shape[:2])
        return EPOutput(logits, T.sigmoid(logits), dt)


# losses

def _step_weights(lengths: np.ndarray, width: int, c: int) -> np.ndarray:
    """(B, L) weights ``1 / (L_b - c)`` on steps ``c..L_b-1``, zero elsewhere."""
    lengths = np.asarray(lengths)
    if np.any(lengths <= c):
        raise InsufficientContextError(f"sequence length {lengths.min()} does not exceed minimum context {c}")
    pos = np.arange(width)[None, :]
    on = (pos >= c) & (pos < lengths[:, None])
    return on / (lengths - c)[:, None]


def ep_time_targets(t_hours: np.ndarray, lengths: np.ndarray, base: float = 30.0) -> np.ndarray:
    """``f(t_last, b) - f(t_i, b)`` per position (zero beyond the sequence end)."""
    t = np.atleast_2d(t_hours)
    ts = scale_time(t, base)
    last = ts[np.arange(t.shape[0]), np.asarray(lengths) - 1]
    out = last[:, None] - ts
    out[np.arange(t.shape[1])[None, :] >= np.asarray(lengths)[:, None]] = 0.0
    return out


def _clamped_bce(probs: Tensor, y: np.ndarray, w: np.ndarray) -> Tensor:
    """Weighted sum of ``-(y log p + (1 - y) log(1 - p))`` with ``p`` clamped."""
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.weighted_sum(T.log(p), w * y)
    neg = T.weighted_sum(T.log(T.sub(1.0, p)), w * (1.0 - y))
    return T.scale(T.add(pos, neg), -1.0)


def ep_loss(probs, y, c: int) -> Tensor:
    """Mean over steps ``c..L-1`` of the label-averaged binary cross-entropy.

    ``probs`` is (L, N); the same label vector ``y`` (N,) is used at every step.
    """
    probs = T.as_tensor(probs)
    y = np.asarray(y, dtype=np.float64)
    length, n = probs.shape
    w = _step_weights(np.array([length]), length, c)[0][:, None] / n
    return _clamped_bce(probs, np.broadcast_to(y, probs.shape), np.broadcast_to(w, probs.shape))


def ep_time_loss(dt_pred, t_hours, c: int, base: float = 30.0) -> Tensor:
    """Mean Huber loss over steps ``c..L-1`` against ``f(t_last) - f(t_i)``."""
    dt_pred = T.as_tensor(dt_pred)
    t = np.asarray(t_hours, dtype=np.float64)
    length = t.shape[0]
    w = _step_weights(np.array([length]), length, c)[0]
    target = ep_time_targets(t[None], np.array([length]), base)[0]
    return T.weighted_sum(T.huber(T.sub(dt_pred, target)), w)


def ep_objective(out: EPOutput, batch: Batch, cfg: EPredictorConfig) -> tuple[Tensor, dict]:
    """Batch mean of ``L_ep + gamma L_t``."""
    if batch.labels is None:
        raise ValueError("EPredictor training needs labelled sequences")
    b, width = batch.tokens.shape
    w = _step_weights(batch.lengths, width, cfg.min_context) / b
    y = np.broadcast_to(batch.labels[:, None, :].astype(np.float64), out.probs.shape)
    wc = np.broadcast_to((w / cfg.n_labels)[..., None], out.probs.shape)
    l_ep = _clamped_bce(out.probs, y, wc)
    target = ep_time_targets(batch.t_hours, batch.lengths, cfg.time_base)
    l_t = T.weighted_sum(T.huber(T.sub(out.dt_pred, target)), w)
    total = T.add(l_ep, T.scale(l_t, cfg.gamma))
    return total, {"ep": float(l_ep.data), "time": float(l_t.data)}


@dataclass
class EPPrediction:
    steps: np.ndarray                  # observation indices i >= c
    probs: np.ndarray                  # (steps, N)
    labels: list[frozenset[int]]       # predicted EP ids per step
    dt_scaled: np.ndarray              # predicted scaled time-to-occurrence
    hours: np.ndarray                  # unscale(dt_scaled, b)


def predict(probs, dt_pred, c: int, threshold: float = 0.7, base: float = 30.0) -> EPPrediction:
    """Threshold per-step probabilities (L, N) and decode hours for steps ``i >= c``."""
    probs = np.asarray(probs, dtype=np.float64)
    dt_pred = np.asarray(dt_pred, dtype=np.float64)
    length = probs.shape[0]
    if length < c:
        raise InsufficientContextError(f"sequence of length {length} is shorter than minimum context {c}")
    p = probs[c:]
    dt = dt_pred[c:]
    labels = [frozenset(np.flatnonzero(row >= threshold).tolist()) for row in p]
    hours = unscale_time(np.maximum(dt, -1.0), base)
    return EPPrediction(np.arange(c, length), p, labels, dt, hours)
