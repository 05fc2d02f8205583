import os

os.environ.setdefault("DTCFORMER_DETERMINISTIC", "1")

import numpy as np
import pytest

from dtcformer.events import Event, EventSequence

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def random_sequence(rng: np.random.Generator, length: int, vocab_size: int = 40, injected_p: float = 0.0,
                    labels=None, vid: str = "toy") -> EventSequence:
    """Monotone toy sequence starting at t=0, m=0 with optional injected flags."""
    dt = rng.exponential(5.0, size=length) * (rng.random(length) > 0.2)
    dm = dt * rng.uniform(0.0, 0.5, size=length)
    dt[0] = dm[0] = 0.0
    t, m = np.cumsum(dt), np.cumsum(dm)
    toks = rng.integers(4, vocab_size, size=length)
    inj = rng.random(length) < injected_p
    inj[0] = False
    events = [Event(int(u), float(a), float(b), bool(f)) for u, a, b, f in zip(toks, t, m, inj)]
    return EventSequence(vid, tuple(events), labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
