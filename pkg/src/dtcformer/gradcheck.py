"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckError(ValueError):
    pass


def _eval(f: Callable[[], Tensor]) -> float:
    val = float(f().data)
    if not np.isfinite(val):
        raise GradCheckError(f"loss is not finite ({val}); cannot compare gradients")
    return val


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    exclude: Mapping[int, np.ndarray] | None = None,
    max_entries: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``f`` rebuilds the scalar loss from the current parameter values.
    ``exclude`` maps a parameter's position in ``params`` to a boolean mask
    of entries to skip (e.g. points sitting on a kink). ``max_entries``
    samples that many entries per parameter instead of checking all of them.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"loss is not finite ({loss.data}); cannot compare gradients")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, p in enumerate(params):
        candidates = np.arange(p.data.size)
        if exclude is not None and k in exclude:
            keep = ~np.asarray(exclude[k], dtype=bool).reshape(-1)
            candidates = candidates[keep]
        if max_entries is not None and candidates.size > max_entries:
            candidates = np.sort(rng.choice(candidates, size=max_entries, replace=False))
        flat = p.data.reshape(-1)
        for j in candidates:
            orig = flat[j]
            flat[j] = orig + h
            up = _eval(f)
            flat[j] = orig - h
            down = _eval(f)
            flat[j] = orig
            num = (up - down) / (2.0 * h)
            ana = analytic[k].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
