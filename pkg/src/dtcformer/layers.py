"""Parameter containers and the building blocks shared by both transformers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMBED_STD = 0.02


class Module:
    """Walks attributes in definition order to find parameters and children."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, law: str = "small"):
        self.weight = T.parameter(np.zeros((d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None
        self.law = law

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int):
        self.weight = T.parameter(np.zeros((n, d)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = T.parameter(np.ones(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int):
        self.up = Linear(d, hidden, law="ffn")
        self.down = Linear(hidden, d, law="ffn")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class MLP(Module):
    """Two-layer head: Linear -> GELU -> Linear."""

    def __init__(self, d: int, hidden: int, d_out: int):
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel: int = 3, causal: bool = True):
        self.kernel = T.parameter(np.zeros((channels, kernel)))
        self.bias = T.parameter(np.zeros(channels))
        self.causal = causal

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d_depthwise(x, self.kernel, self.bias, causal=self.causal)


def init_weights(model: Module, rng: np.random.Generator, n_layers: int) -> None:
    """Initialise every parameter of ``model`` in traversal order.

    Feed-forward projections: ``N(0, 2 / (n_layers * sqrt(d_in)))``.
    Other linear maps and conv kernels (SMALLINIT): ``N(0, sqrt(2 / (5 d_in)))``.
    Embedding tables: ``N(0, 0.02)``. Biases 0, norm gains 1.
    """
    for mod in model.modules():
        if isinstance(mod, Linear):
            d_in = mod.weight.shape[0]
            if mod.law == "ffn":
                std = 2.0 / (n_layers * np.sqrt(d_in))
            else:
                std = np.sqrt(2.0 / (5.0 * d_in))
            mod.weight.data[...] = rng.normal(0.0, std, mod.weight.shape)
            if mod.bias is not None:
                mod.bias.data[...] = 0.0
        elif isinstance(mod, Embedding):
            mod.weight.data[...] = rng.normal(0.0, EMBED_STD, mod.weight.shape)
        elif isinstance(mod, RMSNorm):
            mod.gain.data[...] = 1.0
        elif isinstance(mod, DepthwiseConv):
            k = mod.kernel.shape[1]
            mod.kernel.data[...] = rng.normal(0.0, np.sqrt(2.0 / (5.0 * k)), mod.kernel.shape)
            mod.bias.data[...] = 0.0
        elif hasattr(mod, "reset_parameters"):
            mod.reset_parameters(rng)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def scores(q: Tensor, k: Tensor) -> Tensor:
    """Raw per-head dot products ``q k^T`` for (B, H, L, dh) inputs."""
    return T.matmul(q, T.swapaxes(k, -1, -2))


def attend(raw_scores: Tensor, v: Tensor, mask: np.ndarray, factor: float) -> Tensor:
    """``softmax(raw / sqrt(factor * d_head)) v`` with the boolean ``mask``."""
    dh = v.shape[-1]
    a = T.softmax_rows(T.scale(raw_scores, 1.0 / np.sqrt(factor * dh)), mask)
    return T.matmul(a, v)
