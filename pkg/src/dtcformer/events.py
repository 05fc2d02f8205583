"""DTC event streams: time transform, vocabulary, windowing and JSONL I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESERVED = ("<s>", "</s>", "<pad>", "<unk>")
BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
N_RESERVED = len(RESERVED)

WINDOW_HOURS = 30 * 24.0
WINDOW_KM = 300.0


class DataError(ValueError):
    """Malformed or unusable event data."""


class EmptyWindowError(DataError):
    pass


class DTCParseError(DataError):
    pass


def scale_time(t, base: float):
    """``log_base(t + 1) - 1``; maps hours onto roughly [-1, 1]."""
    if base <= 1:
        raise ValueError(f"time base must be > 1, got {base}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("scale_time is defined for t >= 0 only")
    out = np.log1p(t) / math.log(base) - 1.0
    return float(out) if out.ndim == 0 else out


def unscale_time(ts, base: float):
    """Inverse of :func:`scale_time`: ``base ** (ts + 1) - 1``."""
    if base <= 1:
        raise ValueError(f"time base must be > 1, got {base}")
    ts = np.asarray(ts, dtype=np.float64)
    x = ts + 1.0
    # expm1 keeps precision for tiny intervals; pow is exact at integer exponents
    with np.errstate(over="ignore"):
        out = np.where(x * math.log(base) >= math.log(2.0), np.power(base, x) - 1.0, np.expm1(x * math.log(base)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Event:
    token: int
    t: float
    m: float
    injected: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.t) and math.isfinite(self.m)):
            raise DataError(f"non-finite event time/mileage: {self}")
        if self.t < 0 or self.m < 0:
            raise DataError(f"negative event time/mileage: {self}")


@dataclass(frozen=True)
class EventSequence:
    vehicle_id: str
    events: tuple[Event, ...]
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(sorted(set(int(k) for k in self.labels))))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([e.token for e in self.events], dtype=np.int64)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=np.float64)

    @property
    def mileage(self) -> np.ndarray:
        return np.array([e.m for e in self.events], dtype=np.float64)

    @property
    def injected(self) -> np.ndarray:
        return np.array([e.injected for e in self.events], dtype=bool)

    def label_vector(self, n_labels: int) -> np.ndarray:
        y = np.zeros(n_labels, dtype=np.float64)
        if self.labels:
            y[list(self.labels)] = 1.0
        return y

    def validate(self, vocab_size: int | None = None) -> None:
        if not self.events:
            raise DataError(f"{self.vehicle_id}: empty sequence")
        first = self.events[0]
        if first.t != 0 or first.m != 0:
            raise DataError(f"{self.vehicle_id}: first event must sit at t=0, m=0")
        times = self.times
        if np.any(np.diff(times) < 0):
            raise DataError(f"{self.vehicle_id}: events are not sorted by time")
        if vocab_size is not None and np.any(self.tokens >= vocab_size):
            raise DataError(f"{self.vehicle_id}: token id outside vocabulary of size {vocab_size}")
        if self.labels is not None and len(self.labels) == 0:
            raise DataError(f"{self.vehicle_id}: label set present but empty")

    def rebased(self, start: int = 0, stop: int | None = None) -> EventSequence:
        """Slice ``events[start:stop]`` and shift time/mileage so the first kept event is at 0."""
        kept = self.events[start:stop]
        if not kept:
            raise EmptyWindowError(f"{self.vehicle_id}: empty slice [{start}:{stop}]")
        t0, m0 = kept[0].t, kept[0].m
        events = tuple(replace(e, t=e.t - t0, m=e.m - m0) for e in kept)
        return replace(self, events=events)


def window_sequence(raw: Sequence[tuple[int, float, float]], vehicle_id: str = "",
                    labels: Iterable[int] | None = None,
                    max_hours: float = WINDOW_HOURS, max_km: float = WINDOW_KM) -> EventSequence:
    """Keep events within ``max_hours`` and ``max_km`` of the last one and rebase.

    ``raw`` holds ``(token, unix_seconds, odometer_km)`` sorted by timestamp.
    Both bounds are inclusive.
    """
    if not raw:
        raise EmptyWindowError(f"{vehicle_id}: no events")
    ts = np.array([r[1] for r in raw], dtype=np.float64)
    km = np.array([r[2] for r in raw], dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        raise DataError(f"{vehicle_id}: raw events are not sorted by timestamp")
    hours_before_last = (ts[-1] - ts) / 3600.0
    km_before_last = km[-1] - km
    keep = (hours_before_last <= max_hours) & (km_before_last <= max_km)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise EmptyWindowError(f"{vehicle_id}: no events inside the window")
    ts0, km0 = ts[idx[0]], km[idx[0]]
    events = []
    for i in idx:
        m = km[i] - km0
        if m < 0:
            raise DataError(f"{vehicle_id}: odometer runs backwards inside the window")
        events.append(Event(int(raw[i][0]), (ts[i] - ts0) / 3600.0, float(m)))
    return EventSequence(vehicle_id, tuple(events), None if labels is None else tuple(labels))


def parse_dtc(dtc: str) -> tuple[str, str, str]:
    parts = dtc.split("|")
    if len(parts) != 3 or not all(parts):
        raise DTCParseError(f"malformed DTC {dtc!r}; expected ECU|Base-DTC|Fault-Byte")
    return parts[0], parts[1], parts[2]


@dataclass
class Vocabulary:
    """Bijection between DTC strings and dense ids; ids 0..3 are reserved."""

    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[:N_RESERVED]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, dtcs: Iterable[str]) -> Vocabulary:
        vocab = cls()
        for dtc in dtcs:
            vocab.add(dtc)
        return vocab

    def add(self, dtc: str) -> int:
        if dtc in self._index:
            return self._index[dtc]
        parse_dtc(dtc)
        self._index[dtc] = len(self.tokens)
        self.tokens.append(dtc)
        return self._index[dtc]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, dtc: str) -> bool:
        return dtc in self._index

    def encode(self, dtc: str) -> int:
        parse_dtc(dtc)
        return self._index.get(dtc, UNK_ID)

    def decode(self, token: int) -> str:
        return self.tokens[token]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "reserved": list(RESERVED),
            "tokens": {tok: i for i, tok in enumerate(self.tokens) if i >= N_RESERVED},
        }

    @classmethod
    def from_json(cls, doc: dict) -> Vocabulary:
        if doc.get("version") != 1 or tuple(doc.get("reserved", ())) != RESERVED:
            raise DataError("unsupported vocabulary header")
        body = sorted(doc["tokens"].items(), key=lambda kv: kv[1])
        tokens = list(RESERVED)
        for expected, (tok, i) in enumerate(body, start=N_RESERVED):
            if i != expected:
                raise DataError(f"vocabulary ids are not dense at {tok!r} -> {i}")
            tokens.append(tok)
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_json(json.loads(Path(path).read_text()))


def sequence_to_json(seq: EventSequence, vocab: Vocabulary) -> dict:
    return {
        "vehicle_id": seq.vehicle_id,
        "events": [
            {"dtc": vocab.decode(e.token), "t": e.t, "m": e.m, "injected": e.injected}
            for e in seq.events
        ],
        "ep_labels": None if seq.labels is None else list(seq.labels),
    }


def sequence_from_json(doc: dict, vocab: Vocabulary) -> EventSequence:
    try:
        events = tuple(
            Event(vocab.encode(ev["dtc"]), float(ev["t"]), float(ev["m"]), bool(ev.get("injected", False)))
            for ev in doc["events"]
        )
        labels = doc.get("ep_labels")
        return EventSequence(str(doc["vehicle_id"]), events, None if labels is None else tuple(labels))
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad sequence record: {exc}") from exc


def write_jsonl(path: str | Path, seqs: Iterable[EventSequence], vocab: Vocabulary) -> None:
    with open(path, "w") as fh:
        for seq in seqs:
            fh.write(json.dumps(sequence_to_json(seq, vocab), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path, vocab: Vocabulary) -> list[EventSequence]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            seq = sequence_from_json(doc, vocab)
            seq.validate(len(vocab))
            out.append(seq)
    return out
