"""Optimiser, learning-rate schedule and the two training phases.

Batch order and random-event injection are derived from ``(seed, epoch,
index)`` counters rather than a stateful generator, so a run resumed from a
checkpoint at step ``s`` replays exactly the batches the uninterrupted run
would have seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .batch import Batch, make_batch
from .checkpoint import Checkpoint
from .decoder import EPredictor, EPredictorConfig, ep_objective
from .encoder import CarFormer, CarFormerConfig, pretrain_loss
from .events import EventSequence
from .layers import init_weights
from .synth import inject_random_events
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "AdamW", "NonFiniteError", "TrainConfig", "TrainResult", "clip_grad_norm", "encode_sequences",
    "init_weights", "lr_at", "run_ep_train", "run_pretrain",
]


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class ScheduleError(ValueError):
    """The learning-rate schedule does not fit the number of training steps."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 0.1
    batch_size: int = 8
    epochs: int = 10
    max_steps: int | None = None
    restarts: int = 0
    min_lr: float = 0.0
    clip_norm: float = 1.0
    patience: int = 2
    early_stopping: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``cfg.lr``, then cosine annealing.

    The post-warmup span is split into ``restarts + 1`` equal cycles, each
    restarting from the peak rate.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.warmup_steps >= total_steps:
        raise ScheduleError(f"warmup ({cfg.warmup_steps}) must be shorter than training ({total_steps} steps)")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    cycle = (total_steps - cfg.warmup_steps) / (cfg.restarts + 1)
    pos = ((step - cfg.warmup_steps) % cycle) / cycle
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * pos))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(total):
        raise NonFiniteError("gradient norm is not finite")
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


class AdamW:
    """Adam with bias correction and decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.1,
                 decay_filter: Callable[[str, Tensor], bool] | None = None):
        self.named = list(named_params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        filt = decay_filter or (lambda name, p: p.data.ndim >= 2)
        self.decay = {name: filt(name, p) for name, p in self.named}
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}
        self.t = 0

    def step(self, lr: float) -> None:
        bad = [name for name, p in self.named if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradients in {bad[:5]}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.named:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.decay[name] and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name][...] = state[f"adam.m/{name}"]
            self.v[name][...] = state[f"adam.v/{name}"]
        self.t = t


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, 0xB47C, epoch]).permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def _fit(named: list[tuple[str, Tensor]], n_train: int, make_batch_for: Callable[[int, np.ndarray], object],
         loss_fn: Callable[[object], tuple[Tensor, dict]], val_fn: Callable[[], float],
         snapshot: Callable[[int, dict, "AdamW | None"], Checkpoint], tcfg: TrainConfig,
         resume: Checkpoint | None, stop_at: int | None) -> TrainResult:
    params = [p for _, p in named]
    per_epoch = math.ceil(n_train / tcfg.batch_size)
    total = tcfg.epochs * per_epoch
    if tcfg.max_steps is not None:
        total = min(total, tcfg.max_steps)
    opt = AdamW(named, tcfg.betas, tcfg.eps, tcfg.weight_decay)
    state = {"best_val": None, "bad_epochs": 0, "history": [], "best_step": 0, "stopped_early": False}
    step = 0
    best_params = {name: p.data.copy() for name, p in named}
    if resume is not None:
        step = int(resume.step)
        opt.load_state_dict(resume.tensors, int(resume.meta["adam_t"]))
        state.update(resume.meta["loop"])
        best_params = {name: resume.tensors[f"best/{name}"].copy() for name, _ in named}

    def ckpt(at: int, tensors_extra: bool = True) -> Checkpoint:
        c = snapshot(at, {"adam_t": opt.t, "loop": dict(state)}, opt)
        if tensors_extra:
            c.tensors.update({f"best/{k}": v.copy() for k, v in best_params.items()})
        return c

    while step < total and not state["stopped_early"]:
        if stop_at is not None and step >= stop_at:
            break
        epoch, k = divmod(step, per_epoch)
        idx = _batches(n_train, tcfg.batch_size, tcfg.seed, epoch)[k]
        batch = make_batch_for(epoch, idx)
        for p in params:
            p.grad = None
        loss, parts = loss_fn(batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss became {value} at step {step} ({parts})")
        loss.backward()
        gnorm = clip_grad_norm(params, tcfg.clip_norm)
        lr = lr_at(step, tcfg, total)
        opt.step(lr)
        step += 1
        if step % tcfg.log_every == 0 or step == 1:
            log.info("step %d/%d lr %.2e loss %.4f grad %.3f %s", step, total, lr, value, gnorm,
                     " ".join(f"{k}={v:.4f}" for k, v in parts.items()))
        if step % per_epoch == 0 or step == total:
            val = float(val_fn())
            if not math.isfinite(val):
                raise NonFiniteError(f"validation loss became {val}")
            state["history"].append({"epoch": epoch, "step": step, "train_loss": value, "val_loss": val})
            log.info("epoch %d val loss %.5f", epoch, val)
            if state["best_val"] is None or val < state["best_val"]:
                state["best_val"], state["bad_epochs"], state["best_step"] = val, 0, step
                best_params = {name: p.data.copy() for name, p in named}
            else:
                state["bad_epochs"] += 1
                if tcfg.early_stopping and state["bad_epochs"] >= tcfg.patience:
                    log.info("early stop after epoch %d (best at step %d)", epoch, state["best_step"])
                    state["stopped_early"] = True
    final = ckpt(step)
    current = {name: p.data.copy() for name, p in named}
    for name, p in named:
        p.data[...] = best_params[name]
    best = snapshot(state["best_step"], {"adam_t": opt.t, "loop": dict(state), "best": True}, None)
    for name, p in named:
        p.data[...] = current[name]
    return TrainResult(final, best, list(state["history"]), bool(state["stopped_early"]))


def _model_tensors(prefix: str, named: Sequence[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {f"{prefix}{name}": p.data.copy() for name, p in named}


# pretraining

def inject_for_epoch(seqs: Sequence[EventSequence], idx: Sequence[int], cfg: CarFormerConfig,
                     seed: int, epoch: int | None) -> list[EventSequence]:
    """Fresh random-event injection for each sequence, keyed by (seed, epoch, index).

    ``epoch=None`` selects a separate fixed stream used for evaluation.
    """
    out = []
    for i in idx:
        key = [seed, 0xE7A1, int(i)] if epoch is None else [seed, 0x1A7, epoch, int(i)]
        rng = np.random.default_rng(key)
        out.append(inject_random_events(seqs[i], cfg.injection_p, rng, cfg.vocab_size, cfg.max_len))
    return out


def pretrain_eval_loss(model: CarFormer, seqs: Sequence[EventSequence], batch_size: int, seed: int) -> float:
    """Mean pretraining objective over ``seqs`` with a fixed injection draw."""
    total, count = 0.0, 0
    with T.no_grad():
        for k in range(0, len(seqs), batch_size):
            idx = range(k, min(k + batch_size, len(seqs)))
            batch = make_batch(inject_for_epoch(seqs, idx, model.cfg, seed, None))
            loss, _ = pretrain_loss(model.forward_batch(batch), batch, model.cfg)
            total += float(loss.data) * batch.size
            count += batch.size
    return total / count


def run_pretrain(model: CarFormer, train: Sequence[EventSequence], val: Sequence[EventSequence],
                 tcfg: TrainConfig, resume: Checkpoint | None = None,
                 stop_at: int | None = None) -> TrainResult:
    """Train CarFormer on the next-event, next-time and random-event objectives."""
    cfg = model.cfg
    short = [s.vehicle_id for s in list(train) + list(val) if len(s) < 3]
    if short:
        raise ValueError(f"pretraining needs sequences of at least 3 events: {short[:3]}")
    named = list(model.named_parameters())
    if resume is not None:
        model.load_state_dict(resume.subset("model/"))
    config = {"kind": "carformer", "model": cfg.to_dict(), "train": tcfg.to_dict()}

    def make(epoch, idx):
        return make_batch(inject_for_epoch(train, idx, cfg, tcfg.seed, epoch))

    def snapshot(step, meta, opt):
        tensors = _model_tensors("model/", named)
        if opt is not None:
            tensors.update(opt.state_dict())
        epoch, k = divmod(step, math.ceil(len(train) / tcfg.batch_size))
        rng = {"scheme": "counter", "seed": tcfg.seed, "epoch": epoch, "batch": k}
        return Checkpoint(config, step, tensors, rng, meta)

    return _fit(named, len(train), make, lambda b: pretrain_loss(model.forward_batch(b), b, cfg),
                lambda: pretrain_eval_loss(model, val, tcfg.batch_size, tcfg.seed),
                snapshot, tcfg, resume, stop_at)


# error-pattern training

@dataclass
class Encoded:
    """Encoder features for one sequence: hidden, time and mileage embeddings (L, d)."""
    hidden: np.ndarray
    time_emb: np.ndarray
    mileage_emb: np.ndarray


def encode_sequences(encoder: CarFormer, seqs: Sequence[EventSequence]) -> list[Encoded]:
    """Run the (frozen) encoder once per sequence without building a graph."""
    out = []
    with T.no_grad():
        for s in seqs:
            o = encoder.encode(s)
            out.append(Encoded(o.hidden.data[0], o.time_emb.data[0], o.mileage_emb.data[0]))
    return out


def _pad_features(feats: Sequence[Encoded], width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = feats[0].hidden.shape[-1]
    arrs = [np.zeros((len(feats), width, d)) for _ in range(3)]
    for i, f in enumerate(feats):
        n = f.hidden.shape[0]
        arrs[0][i, :n] = f.hidden
        arrs[1][i, :n] = f.time_emb
        arrs[2][i, :n] = f.mileage_emb
    return arrs[0], arrs[1], arrs[2]


def ep_forward(decoder: EPredictor, encoder: CarFormer, batch: Batch,
               feats: Sequence[Encoded] | None = None, zero_memory: bool = False):
    """Decoder outputs for ``batch``; encoder features come from ``feats`` when frozen."""
    if feats is None:
        o = encoder.forward_batch(batch)
        h, te, me = o.hidden, o.time_emb, o.mileage_emb
    else:
        h, te, me = _pad_features(feats, batch.width)
    memory = np.zeros(np.shape(T.as_tensor(h).data)) if zero_memory else None
    return decoder.forward(h, te, me, batch.t_hours, batch.m_km, memory=memory)


def ep_eval_loss(decoder: EPredictor, encoder: CarFormer, seqs: Sequence[EventSequence],
                 feats: Sequence[Encoded] | None, batch_size: int) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for k in range(0, len(seqs), batch_size):
            sl = slice(k, k + batch_size)
            batch = make_batch(seqs[sl], decoder.cfg.n_labels)
            out = ep_forward(decoder, encoder, batch, None if feats is None else feats[sl])
            loss, _ = ep_objective(out, batch, decoder.cfg)
            total += float(loss.data) * batch.size
            count += batch.size
    return total / count


def run_ep_train(decoder: EPredictor, encoder: CarFormer, train: Sequence[EventSequence],
                 val: Sequence[EventSequence], tcfg: TrainConfig, resume: Checkpoint | None = None,
                 stop_at: int | None = None, extra_config: dict | None = None) -> TrainResult:
    """Train EPredictor on labelled sequences; the encoder stays frozen unless configured otherwise."""
    cfg = decoder.cfg
    c = cfg.min_context
    short = [s.vehicle_id for s in list(train) + list(val) if len(s) <= c or not s.labels]
    if short:
        raise ValueError(f"EP training needs labelled sequences longer than c={c}: {short[:3]}")
    frozen = cfg.freeze_backbone
    named = list(decoder.named_parameters())
    if not frozen:
        named = [(f"backbone.{n}", p) for n, p in encoder.named_parameters()] + named
    if resume is not None:
        decoder.load_state_dict(resume.subset("model/"))
        encoder.load_state_dict(resume.subset("backbone/"))
    train_feats = encode_sequences(encoder, train) if frozen else None
    val_feats = encode_sequences(encoder, val) if frozen else None
    config = {"kind": "epredictor", "model": cfg.to_dict(), "backbone": encoder.cfg.to_dict(),
              "train": tcfg.to_dict(), **(extra_config or {})}

    def make(epoch, idx):
        return idx

    def loss_fn(idx):
        batch = make_batch([train[i] for i in idx], cfg.n_labels)
        feats = [train_feats[i] for i in idx] if frozen else None
        return ep_objective(ep_forward(decoder, encoder, batch, feats), batch, cfg)

    def snapshot(step, meta, opt):
        tensors = _model_tensors("model/", decoder.named_parameters())
        tensors.update(_model_tensors("backbone/", encoder.named_parameters()))
        if opt is not None:
            tensors.update(opt.state_dict())
        epoch, k = divmod(step, math.ceil(len(train) / tcfg.batch_size))
        rng = {"scheme": "counter", "seed": tcfg.seed, "epoch": epoch, "batch": k}
        return Checkpoint(config, step, tensors, rng, meta)

    return _fit(named, len(train), make, loss_fn,
                lambda: ep_eval_loss(decoder, encoder, val, val_feats, tcfg.batch_size),
                snapshot, tcfg, resume, stop_at)


def load_carformer(ckpt: Checkpoint) -> CarFormer:
    cfg_dict = ckpt.config["model"] if ckpt.config.get("kind") == "carformer" else ckpt.config["backbone"]
    model = CarFormer(CarFormerConfig(**cfg_dict))
    prefix = "model/" if ckpt.config.get("kind") == "carformer" else "backbone/"
    model.load_state_dict(ckpt.subset(prefix))
    return model


def load_epredictor(ckpt: Checkpoint) -> tuple[EPredictor, CarFormer]:
    if ckpt.config.get("kind") != "epredictor":
        raise ValueError("checkpoint does not hold an EPredictor")
    decoder = EPredictor(EPredictorConfig(**ckpt.config["model"]))
    decoder.load_state_dict(ckpt.subset("model/"))
    return decoder, load_carformer(ckpt)
