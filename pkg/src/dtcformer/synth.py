"""Synthetic vehicle fleets with planted error-pattern causes.

Background DTCs come from a multivariate Hawkes process with exponential
kernels, simulated by Ogata thinning. Each error pattern (EP) owns a trigger
motif (an ordered run of 3-6 tokens emitted in bursts, the first one early in
the window) and a few symptom tokens whose rate ramps up towards the failure
time. Sequences carrying a motif are labelled with its EP and end at the
failure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .events import N_RESERVED, Event, EventSequence, Vocabulary, window_sequence, EmptyWindowError

log = logging.getLogger(__name__)

_EPOCH0 = 1_600_000_000.0
_BASE_LETTERS = "PCBU"


@dataclass
class GeneratorConfig:
    vocab_size: int = 200
    n_error_patterns: int = 12
    mean_length: float = 150.0
    n_ecus: int = 12
    horizon_hours: tuple[float, float] = (240.0, 700.0)
    branching: float = 0.7
    decay_per_hour: float = 1.0
    zipf_exponent: float = 0.8
    rare_mass: float = 0.03
    motif_len: tuple[int, int] = (3, 6)
    motif_extra_bursts: float = 2.0
    motif_early_frac: float = 0.05
    motif_gap_hours: float = 0.5
    symptom_tokens: int = 2
    symptom_fraction: float = 0.15
    zero_dt_prob: float = 0.15
    zero_dm_prob: float = 0.3
    mean_speed_kmh: float = 0.3
    unlabeled_fraction: float = 0.2
    multi_label_prob: float = 0.2
    ep_imbalance: float = 1.0
    calibration_sequences: int = 200
    max_events: int | None = None  # keep only the first max_events of each window
    seed: int = 0
    # explicit overrides; when given, no calibration is run
    base_intensity: list[float] | None = None
    excitation: list[tuple[int, int, float, float]] | None = None

    def __post_init__(self):
        self.horizon_hours = tuple(float(x) for x in self.horizon_hours)
        self.motif_len = tuple(int(x) for x in self.motif_len)
        if self.vocab_size <= N_RESERVED:
            raise ValueError("vocab_size must leave room for real DTC tokens")
        if not 0 < self.horizon_hours[0] <= self.horizon_hours[1]:
            raise ValueError("horizon_hours must be an increasing positive pair")
        if not 3 <= self.motif_len[0] <= self.motif_len[1] <= 6:
            raise ValueError("motif lengths must lie in [3, 6]")
        for name in ("zero_dt_prob", "zero_dm_prob", "unlabeled_fraction", "multi_label_prob"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.max_events is not None and self.max_events < 3:
            raise ValueError("max_events must be at least 3")
        if self.decay_per_hour <= 0 or self.branching < 0:
            raise ValueError("decays must be > 0 and branching >= 0")


@dataclass
class ResampleConfig:
    theta1: int = 60
    theta2: int = 120
    min_count: int = 5
    p: float = 0.05

    def __post_init__(self):
        if self.theta1 > self.theta2:
            raise ValueError("theta1 must not exceed theta2")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")


@dataclass
class ErrorPattern:
    name: str
    motif: tuple[int, ...]
    symptoms: tuple[int, ...]
    lead_hours: tuple[float, float]
    prior: float


@dataclass
class FleetProcess:
    """Resolved generative world: DTC strings, intensities and EP definitions."""

    config: GeneratorConfig
    dtcs: list[str]
    mu: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    decay: np.ndarray
    patterns: list[ErrorPattern] = field(default_factory=list)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.build(self.dtcs)

    def branching_matrix(self) -> np.ndarray:
        g = np.zeros((self.config.vocab_size,) * 2)
        np.add.at(g, (self.src, self.dst), self.weight / self.decay)
        return g

    def spectral_radius(self) -> float:
        if self.src.size == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.branching_matrix()))))


def _make_dtcs(cfg: GeneratorConfig, rng: np.random.Generator) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < cfg.vocab_size - N_RESERVED:
        ecu = int(rng.integers(1, max(cfg.n_ecus, 1) + 1))
        base = f"{_BASE_LETTERS[rng.integers(4)]}{int(rng.integers(0, 0x4000)):04X}"
        dtc = f"{ecu}|{base}|{int(rng.integers(2))}"
        if dtc not in seen:
            seen.add(dtc)
            out.append(dtc)
    return out


def build_process(cfg: GeneratorConfig) -> FleetProcess:
    """Draw the fleet-level structure from ``cfg.seed`` and calibrate intensities."""
    rng = np.random.default_rng([cfg.seed, 0xF1EE7])
    v = cfg.vocab_size
    real = np.arange(N_RESERVED, v)
    dtcs = _make_dtcs(cfg, rng)

    patterns: list[ErrorPattern] = []
    pool = list(rng.permutation(real))
    need = sum(cfg.motif_len[1] + cfg.symptom_tokens for _ in range(cfg.n_error_patterns))
    if need > len(pool) - 2 and cfg.n_error_patterns:
        raise ValueError(f"vocabulary too small for {cfg.n_error_patterns} error patterns")
    priors = 1.0 / np.arange(1, cfg.n_error_patterns + 1) ** cfg.ep_imbalance
    priors = priors / priors.sum() if cfg.n_error_patterns else priors
    lo, hi = cfg.horizon_hours
    for k in range(cfg.n_error_patterns):
        r = int(rng.integers(cfg.motif_len[0], cfg.motif_len[1] + 1))
        motif = tuple(int(pool.pop()) for _ in range(r))
        symptoms = tuple(int(pool.pop()) for _ in range(cfg.symptom_tokens))
        centre = rng.uniform(lo, hi)
        half = 0.15 * (hi - lo)
        lead = (max(lo, centre - half), min(hi, centre + half))
        patterns.append(ErrorPattern(f"EP{k:03d}", motif, symptoms, lead, float(priors[k])))

    if cfg.base_intensity is not None:
        mu = np.asarray(cfg.base_intensity, dtype=np.float64)
        if mu.shape != (v,):
            raise ValueError(f"base_intensity needs {v} entries")
    else:
        special = {t for p in patterns for t in p.motif + p.symptoms}
        noise = np.array([t for t in real if t not in special], dtype=np.int64)
        mu = np.zeros(v)
        w = 1.0 / np.arange(1, noise.size + 1) ** cfg.zipf_exponent
        mu[rng.permutation(noise)] = (1.0 - cfg.rare_mass) * w / w.sum()
        if special:
            mu[sorted(special)] = cfg.rare_mass / len(special)

    if cfg.excitation is not None:
        exc = np.asarray(cfg.excitation, dtype=np.float64).reshape(-1, 4)
        src, dst = exc[:, 0].astype(np.int64), exc[:, 1].astype(np.int64)
        weight, decay = exc[:, 2].copy(), exc[:, 3].copy()
    elif cfg.branching > 0 and cfg.base_intensity is None:
        src = noise.copy()
        dst = np.empty_like(src)
        for i, u in enumerate(src):
            choice = noise[noise != u]
            dst[i] = choice[rng.integers(choice.size)]
        decay = np.full(src.size, cfg.decay_per_hour)
        weight = cfg.branching * decay
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        weight = decay = np.zeros(0)
    if np.any(mu < 0) or np.any(weight < 0) or np.any(decay <= 0):
        raise ValueError("intensities must be >= 0 and decays > 0")

    proc = FleetProcess(cfg, dtcs, mu, src, dst, weight, decay, patterns)
    rho = proc.spectral_radius()
    if rho >= 1.0:
        raise ValueError(f"excitation spectral radius {rho:.3f} >= 1: intensity explodes")
    if cfg.base_intensity is None:
        _calibrate(proc)
    return proc


def _calibrate(proc: FleetProcess, rounds: int = 3) -> None:
    """Rescale background intensities until the mean windowed length hits the target."""
    cfg = proc.config
    mean_h = float(np.mean(cfg.horizon_hours))
    g = proc.branching_matrix()
    # stationary mean count over a horizon, ignoring edge effects
    rate = np.linalg.solve(np.eye(g.shape[0]) - g.T, proc.mu).sum()
    extra = cfg.symptom_fraction * cfg.mean_length
    extra += (1 - cfg.unlabeled_fraction) * np.mean(cfg.motif_len) * (1 + cfg.motif_extra_bursts)
    target_bg = max(cfg.mean_length - extra, 1.0)
    proc.mu = proc.mu * target_bg / (rate * mean_h)
    for r in range(rounds):
        lengths = [len(_generate_one(proc, np.random.default_rng([cfg.seed, 0xCA1, r, i]), "cal", cap=False))
                   for i in range(cfg.calibration_sequences)]
        observed = float(np.mean(lengths))
        bg = max(observed - extra, 1.0)
        proc.mu = proc.mu * target_bg / bg
        log.debug("calibration round %d: mean length %.2f", r, observed)


def simulate_hawkes(mu: np.ndarray, src: np.ndarray, dst: np.ndarray, weight: np.ndarray,
                    decay: np.ndarray, horizon: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ogata thinning for a multivariate Hawkes process with exponential kernels.

    Pair ``p`` adds ``weight[p] * exp(-decay[p] * (t - t_e))`` to the intensity
    of ``dst[p]`` after every event of type ``src[p]`` at ``t_e``. Returns event
    times and types on ``[0, horizon]``.
    """
    mu_sum = float(mu.sum())
    cum_mu = np.cumsum(mu)
    n_tok = mu.size
    by_src: dict[int, np.ndarray] = {}
    for p, s in enumerate(src):
        by_src.setdefault(int(s), []).append(p)
    by_src = {k: np.asarray(v) for k, v in by_src.items()}
    excite = np.zeros(src.size)
    times: list[float] = []
    kinds: list[int] = []
    t = 0.0
    while True:
        upper = mu_sum + excite.sum()
        if upper <= 0:
            break
        t_next = t + rng.exponential(1.0 / upper)
        if t_next > horizon:
            break
        if excite.size:
            excite *= np.exp(-decay * (t_next - t))
        t = t_next
        lam = mu_sum + excite.sum()
        if rng.random() * upper > lam:
            continue
        if excite.size:
            per_tok = mu + np.bincount(dst, weights=excite, minlength=n_tok)
            u = int(np.searchsorted(np.cumsum(per_tok), rng.random() * lam, side="right"))
        else:
            u = int(np.searchsorted(cum_mu, rng.random() * mu_sum, side="right"))
        u = min(u, n_tok - 1)
        times.append(t)
        kinds.append(u)
        hit = by_src.get(u)
        if hit is not None:
            excite[hit] += weight[hit]
    return np.asarray(times), np.asarray(kinds, dtype=np.int64)


def _contains_in_order(tokens: Sequence[int], motif: Sequence[int]) -> bool:
    it = iter(tokens)
    return all(any(tok == m for tok in it) for m in motif)


def _generate_one(proc: FleetProcess, rng: np.random.Generator, vehicle_id: str,
                  cap: bool = True) -> EventSequence:
    cfg = proc.config
    labels: list[int] = []
    if proc.patterns and rng.random() >= cfg.unlabeled_fraction:
        priors = np.array([p.prior for p in proc.patterns])
        first = int(rng.choice(len(priors), p=priors))
        labels.append(first)
        if len(priors) > 1 and rng.random() < cfg.multi_label_prob:
            rest = priors.copy()
            rest[first] = 0.0
            labels.append(int(rng.choice(len(priors), p=rest / rest.sum())))
    if labels:
        horizon = rng.uniform(*proc.patterns[labels[0]].lead_hours)
    else:
        horizon = rng.uniform(*cfg.horizon_hours)

    times, kinds = simulate_hawkes(proc.mu, proc.src, proc.dst, proc.weight, proc.decay, horizon, rng)
    chunks_t, chunks_u = [times], [kinds]
    for k in labels:
        pat = proc.patterns[k]
        n_bursts = 1 + int(rng.poisson(cfg.motif_extra_bursts))
        for b in range(n_bursts):
            if b == 0:
                start = rng.uniform(0.0, cfg.motif_early_frac * horizon)
            else:
                start = rng.uniform(0.0, horizon)
            gaps = rng.exponential(cfg.motif_gap_hours, size=len(pat.motif) - 1)
            bt = start + np.concatenate([[0.0], np.cumsum(gaps)])
            if bt[-1] > horizon:
                if b > 0:
                    continue
                bt = np.maximum(bt - (bt[-1] - horizon), 0.0)
            chunks_t.append(bt)
            chunks_u.append(np.asarray(pat.motif))
        n_sym = rng.poisson(cfg.symptom_fraction * cfg.mean_length / len(labels))
        if n_sym and pat.symptoms:
            # rate grows like (t / horizon)^2: invert the cubic CDF
            chunks_t.append(horizon * rng.random(n_sym) ** (1.0 / 3.0))
            chunks_u.append(np.asarray(pat.symptoms)[rng.integers(len(pat.symptoms), size=n_sym)])

    t_all = np.concatenate(chunks_t)
    u_all = np.concatenate(chunks_u).astype(np.int64)
    if t_all.size == 0:
        t_all, u_all = np.array([0.0]), np.array([int(np.argmax(proc.mu))])
    order = np.argsort(t_all, kind="stable")
    t_all, u_all = t_all[order], u_all[order]

    for i in range(1, t_all.size):
        if rng.random() < cfg.zero_dt_prob:
            t_all[i] = t_all[i - 1]
    dt = np.diff(t_all, prepend=t_all[0])
    moving = (rng.random(t_all.size) >= cfg.zero_dm_prob) & (dt > 0)
    speed = rng.exponential(cfg.mean_speed_kmh, size=t_all.size)
    km = np.cumsum(np.where(moving, dt * speed, 0.0))

    epoch = _EPOCH0 + rng.uniform(0, 3e7)
    odo = rng.uniform(1_000, 150_000)
    raw = [(int(u), epoch + 3600.0 * t, odo + m) for u, t, m in zip(u_all, t_all, km)]
    seq = window_sequence(raw, vehicle_id)
    if cap and cfg.max_events is not None and len(seq) > cfg.max_events:
        seq = seq.rebased(0, cfg.max_events)
    if labels:
        toks = list(seq.tokens)
        labels = [k for k in labels if _contains_in_order(toks, proc.patterns[k].motif)]
    return replace(seq, labels=tuple(labels) if labels else None)


@dataclass
class Fleet:
    process: FleetProcess
    vocab: Vocabulary
    sequences: list[EventSequence]

    @property
    def n_labels(self) -> int:
        return len(self.process.patterns)


def generate_fleet(cfg: GeneratorConfig, n_sequences: int) -> Fleet:
    """Sample ``n_sequences`` vehicles; sequence ``i`` uses its own RNG stream."""
    proc = build_process(cfg)
    seqs = []
    for i in range(n_sequences):
        rng = np.random.default_rng([cfg.seed, 0x5E0, i])
        seqs.append(_generate_one(proc, rng, f"veh{cfg.seed:04d}-{i:06d}"))
    return Fleet(proc, proc.vocab, seqs)


def inject_random_events(seq: EventSequence, p: float, rng: np.random.Generator,
                         vocab_size: int, max_len: int | None = None) -> EventSequence:
    """Insert geometrically many random events after each original event.

    After event ``i`` (all but the last), new events are drawn while a
    uniform draw falls below ``p``: ``t' ~ U(t_i, t_i+1)``,
    ``m' ~ U(m_i, m_i+1)``, ``u' ~ U(real vocabulary)``. Several events in one
    gap are sorted so time and mileage stay monotone. ``max_len`` truncates
    the tail of the result.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"injection probability must be in [0, 1), got {p}")
    n = len(seq)
    if n < 3:
        raise ValueError("injection needs at least 3 events")
    if p == 0.0:
        return seq
    out: list[Event] = []
    for i, ev in enumerate(seq.events):
        out.append(ev)
        if i == n - 1:
            break
        k = 0
        while rng.random() < p:
            k += 1
        if k:
            nxt = seq.events[i + 1]
            ts = np.sort(rng.uniform(ev.t, nxt.t, size=k))
            ms = np.sort(rng.uniform(ev.m, nxt.m, size=k))
            us = rng.integers(N_RESERVED, vocab_size, size=k)
            out.extend(Event(int(u), float(t), float(m), True) for u, t, m in zip(us, ts, ms))
    if max_len is not None and len(out) > max_len:
        log.debug("%s: injection grew sequence to %d, truncated to %d", seq.vehicle_id, len(out), max_len)
        out = out[:max_len]
    return replace(seq, events=tuple(out))


def label_counts(seqs: Sequence[EventSequence], n_labels: int) -> np.ndarray:
    counts = np.zeros(n_labels, dtype=np.int64)
    for s in seqs:
        for k in s.labels or ():
            counts[k] += 1
    return counts


def resample_classes(seqs: Sequence[EventSequence], cfg: ResampleConfig, n_labels: int,
                     rng: np.random.Generator, vocab_size: int,
                     max_len: int | None = None) -> tuple[list[EventSequence], list[int]]:
    """Balance EP classes: drop rare ones, downsample to ``theta2``, upsample to ``theta1``.

    Returns the new dataset and ``kept``, the original ids of surviving labels
    (new label ``j`` is old label ``kept[j]``). Up-sampled copies always carry
    at least one injected event; ``max_len`` caps their length.
    """
    labelled = [s for s in seqs if s.labels]
    counts = label_counts(labelled, n_labels)
    kept = [k for k in range(n_labels) if counts[k] >= cfg.min_count]
    remap = {old: new for new, old in enumerate(kept)}
    data: list[EventSequence] = []
    for s in labelled:
        labels = tuple(remap[k] for k in s.labels if k in remap)
        if labels:
            data.append(replace(s, labels=labels))
    if not data:
        raise ValueError("no labelled sequences left after dropping rare classes")
    n = len(kept)

    counts = label_counts(data, n)
    for k in np.argsort(-counts, kind="stable"):
        excess = counts[k] - cfg.theta2
        if excess <= 0:
            continue
        members = [i for i, s in enumerate(data) if k in s.labels]
        drop = set(rng.choice(members, size=excess, replace=False).tolist())
        data = [s for i, s in enumerate(data) if i not in drop]
        counts = label_counts(data, n)

    copies = 0
    for k in np.argsort(counts, kind="stable"):
        if counts[k] >= cfg.theta1:
            continue
        members = [s for s in data if k in s.labels]
        if not members:
            continue
        quiet = [s for s in members if all(counts[j] < cfg.theta2 for j in s.labels if j != k)]
        pool = quiet or members
        while counts[k] < cfg.theta1:
            src = pool[int(rng.integers(len(pool)))]
            dup = inject_random_events(src, cfg.p, rng, vocab_size, max_len)
            while not dup.injected.any():
                dup = inject_random_events(src, cfg.p, rng, vocab_size, max_len)
            copies += 1
            data.append(replace(dup, vehicle_id=f"{src.vehicle_id}#dup{copies}"))
            for j in src.labels:
                counts[j] += 1
    return data, kept
