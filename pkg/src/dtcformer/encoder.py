"""CarFormer: causal encoder over (DTC, time, mileage) triplets.

The default ``rot-ce`` variant adds the context embedding ``CE = T + M`` to
the projected queries and keys of every layer, rotates both with RoPE and
scales scores by ``sqrt(3 d_head)``. The other variants reproduce the
embedding ablations (time / time-mileage inputs, DeBERTa-style mileage score
terms, and a GPT baseline with learned absolute positions).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np

from . import tensor as T
from .batch import Batch
from .embeddings import M_MAX, THETA0, Embeddings
from .events import EventSequence, scale_time
from .layers import (Embedding, FeedForward, Linear, Module, RMSNorm, attend, causal_mask,
                     init_weights, merge_heads, scores, split_heads)
from .tensor import Tensor

CARFORMER_VARIANTS = ("rot-ce", "time", "time-mileage", "time-c2m-m2c", "time-m2c", "gpt")
RANDOM_NORMS = ("all", "injected")


@dataclass
class CarFormerConfig:
    vocab_size: int = 200
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    variant: str = "rot-ce"
    alpha: float = 1.0
    beta: float = 1.0
    injection_p: float = 0.05
    time_base: float = 10.0
    m_max: int = M_MAX
    theta0: float = THETA0
    ffn_mult: int = 2
    rms_eps: float = 1e-6
    random_norm: str = "all"

    def __post_init__(self):
        if self.variant not in CARFORMER_VARIANTS:
            raise ValueError(f"unknown CarFormer variant {self.variant!r}; choose from {CARFORMER_VARIANTS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.random_norm not in RANDOM_NORMS:
            raise ValueError(f"random_norm must be one of {RANDOM_NORMS}")

    @classmethod
    def full_scale(cls, vocab_size: int = 8710) -> CarFormerConfig:
        return cls(vocab_size=vocab_size, d_model=600, n_layers=6, n_heads=12, max_len=258)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def uses_rope(self) -> bool:
        return self.variant == "rot-ce"

    @property
    def score_terms(self) -> tuple[str, ...]:
        terms = ["c2c"]
        if "c2m" in self.variant:
            terms.append("c2m")
        if "m2c" in self.variant:
            terms.append("m2c")
        return tuple(terms)


@dataclass
class EncoderOutput:
    hidden: Tensor          # (B, L, d)
    logits: Tensor          # (B, L, V)
    dt_pred: Tensor         # (B, L)
    random_logits: Tensor   # (B, L)
    event_emb: Tensor       # (B, L, d)
    time_emb: Tensor        # (B, L, d)
    mileage_emb: Tensor     # (B, L, d)


def ctma_scores(e: Tensor, ce: Tensor, wq: Linear, wk: Linear, n_heads: int,
                positions: np.ndarray, theta0: float = THETA0) -> Tensor:
    """Per-head ``RoPE(W_q e + CE) . RoPE(W_k e + CE)`` raw scores."""
    q = split_heads(T.add(wq(e), ce), n_heads)
    k = split_heads(T.add(wk(e), ce), n_heads)
    return scores(T.rope(q, positions, theta0), T.rope(k, positions, theta0))


def ctma_terms(e: np.ndarray, ce: np.ndarray, wq: np.ndarray, wk: np.ndarray,
               positions: np.ndarray, theta0: float = THETA0) -> tuple[np.ndarray, ...]:
    """The four score products of the expanded rotated query-key dot product.

    With ``R_i`` the rotation at position ``i`` these are
    ``(R e Wq)(R e Wk)^T``, ``(R e Wq)(R ce)^T``, ``(R ce)(R e Wk)^T`` and
    ``(R ce)(R ce)^T``; single head, plain arrays.
    """
    pos = np.asarray(positions)

    def rot(x):
        return T.rope(Tensor(x), pos, theta0).data

    qe, ke, c = rot(e @ wq), rot(e @ wk), rot(ce)
    return qe @ ke.T, qe @ c.T, c @ ke.T, c @ c.T


def ctma_attention(e: Tensor, ce: Tensor, layer: EncoderLayer, mask: np.ndarray,
                   positions: np.ndarray | None = None) -> Tensor:
    """Context-time-mileage attention for (B, L, d) inputs, heads merged and projected."""
    length = e.shape[-2]
    mask = np.asarray(mask, dtype=bool)
    if ce.shape != e.shape:
        raise ValueError(f"context embedding shape {ce.shape} does not match {e.shape}")
    if mask.shape != (length, length):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {length}")
    positions = np.arange(length) if positions is None else positions
    raw = ctma_scores(e, ce, layer.wq, layer.wk, layer.cfg.n_heads, positions, layer.cfg.theta0)
    v = split_heads(layer.wv(e), layer.cfg.n_heads)
    return layer.wo(merge_heads(attend(raw, v, mask, 3.0)))


class EncoderLayer(Module):
    def __init__(self, cfg: CarFormerConfig):
        d = cfg.d_model
        self.wq = Linear(d, d, bias=False)
        self.wk = Linear(d, d, bias=False)
        self.wv = Linear(d, d, bias=False)
        self.wo = Linear(d, d)
        if "c2m" in cfg.variant:
            self.wk_m = Linear(d, d, bias=False)
        if "m2c" in cfg.variant:
            self.wq_m = Linear(d, d, bias=False)
        self.norm1 = RMSNorm(d, cfg.rms_eps)
        self.ffn = FeedForward(d, cfg.ffn_mult * d)
        self.norm2 = RMSNorm(d, cfg.rms_eps)
        self.cfg = cfg

    def score_parts(self, x: Tensor, ce: Tensor, m: Tensor, positions: np.ndarray) -> dict[str, Tensor]:
        """Raw score terms before summation and scaling."""
        cfg, h = self.cfg, self.cfg.n_heads
        if cfg.uses_rope:
            return {"ctma": ctma_scores(x, ce, self.wq, self.wk, h, positions, cfg.theta0)}
        q = split_heads(self.wq(x), h)
        k = split_heads(self.wk(x), h)
        parts = {"c2c": scores(q, k)}
        if "c2m" in cfg.score_terms:
            parts["c2m"] = scores(q, split_heads(self.wk_m(m), h))
        if "m2c" in cfg.score_terms:
            parts["m2c"] = scores(split_heads(self.wq_m(m), h), k)
        return parts

    def __call__(self, x: Tensor, ce: Tensor, m: Tensor, positions: np.ndarray,
                 mask: np.ndarray) -> Tensor:
        parts = self.score_parts(x, ce, m, positions)
        raw = T.stack_sum(parts.values())
        factor = 3.0 if self.cfg.uses_rope else float(len(parts))
        v = split_heads(self.wv(x), self.cfg.n_heads)
        ctx = merge_heads(attend(raw, v, mask, factor))
        x1 = self.norm1(T.add(x, self.wo(ctx)))
        return self.norm2(T.add(x1, self.ffn(x1)))


class CarFormer(Module):
    def __init__(self, cfg: CarFormerConfig, seed: int = 0):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = Embeddings(cfg.vocab_size, d, cfg.m_max)
        if cfg.variant == "gpt":
            self.pos = Embedding(cfg.max_len, d)
        self.layers = [EncoderLayer(cfg) for _ in range(cfg.n_layers)]
        self.head_norm = RMSNorm(d, cfg.rms_eps)
        self.next_event = Linear(d, cfg.vocab_size)
        self.next_time = Linear(d, 1)
        self.random_head = Linear(d, 1)
        init_weights(self, np.random.default_rng(seed), cfg.n_layers)

    def input_stream(self, e: Tensor, t_emb: Tensor, m_emb: Tensor, length: int) -> Tensor:
        v = self.cfg.variant
        if v == "gpt":
            return T.add(e, self.pos(np.arange(length)))
        if v == "rot-ce":
            return e
        if v == "time-mileage":
            return T.add(T.add(e, t_emb), m_emb)
        return T.add(e, t_emb)

    def forward(self, tokens: np.ndarray, t_hours: np.ndarray, m_km: np.ndarray) -> EncoderOutput:
        tokens = np.atleast_2d(tokens)
        t_hours = np.atleast_2d(t_hours)
        m_km = np.atleast_2d(m_km)
        length = tokens.shape[1]
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.cfg.max_len}; window it first")
        t_scaled = scale_time(t_hours, self.cfg.time_base)
        e = self.embed.event_type(tokens)
        t_emb = self.embed.time(t_scaled)
        m_emb = self.embed.mileage(m_km)
        ce = T.add(t_emb, m_emb)
        positions = np.arange(length)
        mask = causal_mask(length)
        x = self.input_stream(e, t_emb, m_emb, length)
        for layer in self.layers:
            x = layer(x, ce, m_emb, positions, mask)
        logits = self.next_event(self.head_norm(x))
        dt = T.reshape(self.next_time(x), tokens.shape)
        rnd = T.reshape(self.random_head(x), tokens.shape)
        return EncoderOutput(x, logits, dt, rnd, e, t_emb, m_emb)

    def forward_batch(self, batch: Batch) -> EncoderOutput:
        return self.forward(batch.tokens, batch.t_hours, batch.m_km)

    def encode(self, seq: EventSequence) -> EncoderOutput:
        return self.forward(seq.tokens[None], seq.times[None], seq.mileage[None])


# losses on a single sequence (raw sums as written in the objective)

def _dt_targets(t_hours: np.ndarray, base: float) -> np.ndarray:
    ts = scale_time(np.asarray(t_hours, dtype=np.float64), base)
    return np.diff(ts, axis=-1)


def next_event_loss(logits: Tensor, tokens: np.ndarray, injected: np.ndarray) -> Tensor:
    """Summed cross-entropy of ``logits[i]`` against ``tokens[i+1]`` over non-injected ``i``."""
    tokens = np.asarray(tokens)
    injected = np.asarray(injected, dtype=bool)
    n = tokens.shape[-1]
    if n < 2:
        raise ValueError("next-event loss needs at least two events")
    w = (~injected[:-1]).astype(np.float64)
    if not w.any():
        raise ValueError("every position is injected; next-event loss is undefined")
    return T.cross_entropy(logits[:-1], tokens[1:], w)


def next_time_loss(dt_pred: Tensor, t_hours: np.ndarray, injected: np.ndarray,
                   base: float = 10.0, beta: float = 1.0) -> Tensor:
    """Summed Huber loss on scaled inter-event times over non-injected positions."""
    target = _dt_targets(t_hours, base)
    w = (~np.asarray(injected, dtype=bool)[:-1]).astype(np.float64)
    return T.weighted_sum(T.huber(T.sub(dt_pred[:-1], target), beta), w)


def random_event_loss(random_logits: Tensor, injected: np.ndarray) -> Tensor:
    """Summed BCE between the random-event head and the injected flags (all positions)."""
    y = np.asarray(injected, dtype=np.float64)
    return T.bce_with_logits(random_logits, y, np.ones_like(y))


def total_pretrain_loss(l_c: Tensor, l_t: Tensor, l_r: Tensor, alpha: float, beta: float,
                        length: int, n_random: int, random_norm: str = "all") -> Tensor:
    """``(L_c + alpha L_t) / (L - |R|) + beta * L_r / norm``.

    ``norm`` is ``L`` (``random_norm="all"``) or ``|R|`` (``"injected"``);
    the random term is dropped when ``|R| = 0``.
    """
    if length <= n_random:
        raise ValueError(f"degenerate sequence: length {length} <= injected count {n_random}")
    main = T.scale(T.add(l_c, T.scale(l_t, alpha)), 1.0 / (length - n_random))
    if n_random == 0 or beta == 0:
        return main
    norm = length if random_norm == "all" else n_random
    return T.add(main, T.scale(l_r, beta / norm))


def sequence_pretrain_loss(out: EncoderOutput, seq: EventSequence, cfg: CarFormerConfig,
                           row: int = 0) -> Tensor:
    n = len(seq)
    logits = out.logits[row, :n]
    dt = out.dt_pred[row, :n]
    rnd = out.random_logits[row, :n]
    inj = seq.injected
    l_c = next_event_loss(logits, seq.tokens, inj)
    l_t = next_time_loss(dt, seq.times, inj, cfg.time_base)
    l_r = random_event_loss(rnd, inj)
    return total_pretrain_loss(l_c, l_t, l_r, cfg.alpha, cfg.beta, n, int(inj.sum()), cfg.random_norm)


def pretrain_loss(out: EncoderOutput, batch: Batch, cfg: CarFormerConfig) -> tuple[Tensor, dict]:
    """Batch mean of the per-sequence pretraining objective, vectorised over positions."""
    b, width = batch.tokens.shape
    lengths = batch.lengths
    valid = batch.valid
    inj = batch.injected & valid
    n_rand = inj.sum(axis=1)
    if np.any(lengths <= n_rand):
        raise ValueError("a sequence in the batch has no real events")
    pos = np.arange(width)[None, :]
    has_next = pos < (lengths[:, None] - 1)
    sup = has_next & ~inj
    main_w = sup / (lengths - n_rand)[:, None] / b

    nxt = np.concatenate([batch.tokens[:, 1:], np.zeros((b, 1), dtype=np.int64)], axis=1)
    l_c = T.cross_entropy(out.logits, nxt, main_w)

    ts = batch.t_scaled(cfg.time_base)
    target = np.concatenate([np.diff(ts, axis=1), np.zeros((b, 1))], axis=1)
    l_t = T.weighted_sum(T.huber(T.sub(out.dt_pred, target)), main_w)

    norm = lengths if cfg.random_norm == "all" else np.maximum(n_rand, 1)
    rand_w = valid * (n_rand > 0)[:, None] / norm[:, None] / b
    l_r = T.bce_with_logits(out.random_logits, inj.astype(np.float64), rand_w)

    total = T.add(T.add(l_c, T.scale(l_t, cfg.alpha)), T.scale(l_r, cfg.beta))
    parts = {"next_event": float(l_c.data), "next_time": float(l_t.data), "random": float(l_r.data)}
    return total, parts


def next_event_predictions(out: EncoderOutput) -> np.ndarray:
    return np.argmax(out.logits.data, axis=-1)
