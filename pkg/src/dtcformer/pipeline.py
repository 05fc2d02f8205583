"""End-to-end stages: data generation, both training phases, evaluation and ablations.

Each stage reads and writes plain files (JSONL, JSON, CSV, checkpoints) so
the CLI can run them independently.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import checkpoint as ckpt_io
from . import tensor as T
from .batch import make_batch
from .decoder import EP_VARIANTS, EPredictor, EPredictorConfig, ep_time_targets
from .encoder import CARFORMER_VARIANTS, CarFormer, CarFormerConfig
from .events import EventSequence, Vocabulary, read_jsonl, write_jsonl
from .metrics import (build_curve, confusion_counts, cpmw, f1_from_counts, mae, mae_hours_summary, mape,
                      rmse, weighted_slope, write_curves_csv)
from .synth import GeneratorConfig, ResampleConfig, generate_fleet, resample_classes
from .training import (TrainConfig, encode_sequences, ep_forward, inject_for_epoch, load_carformer,
                       load_epredictor, run_ep_train, run_pretrain)

log = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "n_sequences": 1200,
        "split": [0.7, 0.15, 0.15],
        "generator": {},
        "resample": {},
    },
    "carformer": {},
    "pretrain": {"lr": 5e-4, "warmup_steps": 100, "epochs": 10, "batch_size": 8},
    "epredictor": {},
    "ep_train": {"lr": 1e-4, "warmup_steps": 100, "epochs": 10, "batch_size": 8, "patience": 2,
                 "early_stopping": True},
    "eval": {"theta": 0.8, "delta": 2.0, "mae_theta": 0.3, "debounce": 3, "eval_seed": 1234},
    "ablate": {"variants": ["rotnocross-ce-1-2", "rotcross-key-value-ce-2",
                            "rotcross-key-value-scaled-ce-2", "cross-mixffn"]},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_dotted(cfg: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> dict:
    """Read a YAML config over the defaults; ``overrides`` are ``section.key=value`` strings."""
    doc: dict = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
    cfg = _merge(DEFAULTS, doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key.strip(), yaml.safe_load(raw))
    validate_config(cfg)
    return cfg


def _build(cls, section: dict, name: str, **extra):
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def generator_config(cfg: dict) -> GeneratorConfig:
    return _build(GeneratorConfig, {"seed": cfg["seed"], **cfg["data"]["generator"]}, "data.generator")


def carformer_config(cfg: dict, vocab_size: int | None = None, **extra) -> CarFormerConfig:
    section = dict(cfg["carformer"])
    if vocab_size is not None:
        section["vocab_size"] = vocab_size
    section.update(extra)
    return _build(CarFormerConfig, section, "carformer")


def epredictor_config(cfg: dict, d_model: int, n_labels: int, **extra) -> EPredictorConfig:
    section = {**cfg["epredictor"], "d_model": d_model, "n_labels": n_labels, **extra}
    return _build(EPredictorConfig, section, "epredictor")


def train_config(cfg: dict, phase: str, **extra) -> TrainConfig:
    return _build(TrainConfig, {"seed": cfg["seed"], **cfg[phase], **extra}, phase)


def validate_config(cfg: dict) -> None:
    split = cfg["data"]["split"]
    if len(split) != 3 or any(x <= 0 for x in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("data.split must be three positive fractions summing to 1")
    generator_config(cfg)
    _build(ResampleConfig, cfg["data"]["resample"], "data.resample")
    car = carformer_config(cfg)
    epredictor_config(cfg, car.d_model, 1)
    train_config(cfg, "pretrain")
    train_config(cfg, "ep_train")
    for v in cfg["ablate"]["variants"]:
        if v not in EP_VARIANTS and v not in CARFORMER_VARIANTS:
            raise ConfigError(f"ablate: unknown variant {v!r}")


# data

def split_by_vehicle(seqs: Sequence[EventSequence], fractions: Sequence[float],
                     seed: int) -> tuple[list[EventSequence], ...]:
    """Partition by vehicle id so no vehicle lands in two splits."""
    vids = sorted({s.vehicle_id.split("#")[0] for s in seqs})
    order = np.random.default_rng([seed, 0x5B17]).permutation(len(vids))
    n = len(vids)
    cut1 = int(round(fractions[0] * n))
    cut2 = cut1 + int(round(fractions[1] * n))
    part = {}
    for rank, j in enumerate(order):
        part[vids[j]] = 0 if rank < cut1 else (1 if rank < cut2 else 2)
    out: tuple[list, ...] = ([], [], [])
    for s in seqs:
        out[part[s.vehicle_id.split("#")[0]]].append(s)
    return out


def gen_data(cfg: dict, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gcfg = generator_config(cfg)
    fleet = generate_fleet(gcfg, int(cfg["data"]["n_sequences"]))
    train, val, test = split_by_vehicle(fleet.sequences, cfg["data"]["split"], cfg["seed"])
    fleet.vocab.save(out / "vocab.json")
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_jsonl(out / f"{name}.jsonl", part, fleet.vocab)
    info = {
        "n_labels": fleet.n_labels,
        "vocab_size": len(fleet.vocab),
        "counts": {"train": len(train), "val": len(val), "test": len(test)},
        "patterns": [{"name": p.name, "motif": [fleet.vocab.decode(t) for t in p.motif],
                      "lead_hours": list(p.lead_hours)} for p in fleet.process.patterns],
        "mean_length": float(np.mean([len(s) for s in fleet.sequences])),
    }
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def load_split(data_dir: str | Path, name: str) -> tuple[list[EventSequence], Vocabulary, dict]:
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.json")
    info = json.loads((data_dir / "dataset.json").read_text())
    return read_jsonl(data_dir / f"{name}.jsonl", vocab), vocab, info


def _usable(seqs: Sequence[EventSequence], min_len: int) -> list[EventSequence]:
    return [s for s in seqs if len(s) >= min_len]


def remap_labels(seqs: Sequence[EventSequence], kept: Sequence[int], min_len: int) -> list[EventSequence]:
    """Project labels onto the compacted label space; drop sequences left without labels."""
    remap = {old: new for new, old in enumerate(kept)}
    out = []
    for s in seqs:
        if not s.labels or len(s) < min_len:
            continue
        labels = tuple(remap[k] for k in s.labels if k in remap)
        if labels:
            out.append(replace(s, labels=labels))
    return out


# pretraining

def pretrain(cfg: dict, data_dir: str | Path, out_dir: str | Path, variant: str | None = None,
             tag: str = "carformer") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, vocab, _ = load_split(data_dir, "train")
    val, _, _ = load_split(data_dir, "val")
    extra = {"variant": variant} if variant else {}
    mcfg = carformer_config(cfg, vocab_size=len(vocab), **extra)
    model = CarFormer(mcfg, seed=cfg["seed"])
    tcfg = train_config(cfg, "pretrain")
    res = run_pretrain(model, _usable(train, 3), _usable(val, 3), tcfg)
    ckpt_io.save(out / f"{tag}.ckpt", res.final)
    ckpt_io.save(out / f"{tag}_best.ckpt", res.best)
    log_doc = {"history": res.history, "n_parameters": model.n_parameters()}
    (out / f"{tag}_log.json").write_text(json.dumps(log_doc, indent=2, sort_keys=True) + "\n")
    return log_doc


def _majority_token(seqs: Sequence[EventSequence]) -> int:
    counts: dict[int, int] = {}
    for s in seqs:
        for tok in s.tokens[1:]:
            counts[int(tok)] = counts.get(int(tok), 0) + 1
    return min(counts, key=lambda k: (-counts[k], k))


def eval_pretrain(ckpt_path: str | Path, data_dir: str | Path, split: str = "test",
                  eval_seed: int = 1234) -> dict:
    """Next-event accuracy, majority baseline and next-time MAPE/RMSE on a split."""
    ck = ckpt_io.load(ckpt_path)
    model = load_carformer(ck)
    cfg = model.cfg
    seqs = _usable(load_split(data_dir, split)[0], 3)
    train = load_split(data_dir, "train")[0]
    majority = _majority_token(train)
    hits = total = maj_hits = 0
    preds, targets = [], []
    with T.no_grad():
        for k in range(0, len(seqs), 16):
            idx = range(k, min(k + 16, len(seqs)))
            batch = make_batch(inject_for_epoch(seqs, idx, cfg, eval_seed, None))
            o = model.forward_batch(batch)
            am = np.argmax(o.logits.data, axis=-1)
            ts = batch.t_scaled(cfg.time_base)
            for b, n in enumerate(batch.lengths):
                keep = ~batch.injected[b, :n - 1]
                nxt = batch.tokens[b, 1:n]
                hits += int(np.sum((am[b, :n - 1] == nxt)[keep]))
                maj_hits += int(np.sum((nxt == majority)[keep]))
                total += int(keep.sum())
                preds.append(o.dt_pred.data[b, :n - 1][keep])
                targets.append(np.diff(ts[b, :n])[keep])
    pred, target = np.concatenate(preds), np.concatenate(targets)
    mape_val, skipped = mape(pred, target)
    return {
        "variant": cfg.variant,
        "acc": hits / total,
        "majority_acc": maj_hits / total,
        "majority_token": majority,
        "mape": mape_val,
        "mape_skipped_zero_targets": skipped,
        "rmse": rmse(pred, target),
        "mae": mae(pred, target),
        "n_positions": total,
        "n_sequences": len(seqs),
    }


# error-pattern phase

def train_ep(cfg: dict, data_dir: str | Path, backbone_ckpt: str | Path, out_dir: str | Path,
             variant: str | None = None, tag: str = "epredictor") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, vocab, info = load_split(data_dir, "train")
    val, _, _ = load_split(data_dir, "val")
    encoder = load_carformer(ckpt_io.load(backbone_ckpt))
    extra = {"variant": variant} if variant else {}
    probe = epredictor_config(cfg, encoder.cfg.d_model, 1, **extra)
    c = probe.min_context
    rcfg = _build(ResampleConfig, cfg["data"]["resample"], "data.resample")
    rng = np.random.default_rng([cfg["seed"], 0x4E5A])
    labelled = [s for s in train if s.labels and len(s) > c]
    data, kept = resample_classes(labelled, rcfg, info["n_labels"], rng, len(vocab), encoder.cfg.max_len)
    val_ep = remap_labels(val, kept, c + 1)
    if not val_ep:
        raise ValueError("validation split has no usable labelled sequences")
    dcfg = epredictor_config(cfg, encoder.cfg.d_model, len(kept), **extra)
    decoder = EPredictor(dcfg, seed=cfg["seed"])
    tcfg = train_config(cfg, "ep_train")
    res = run_ep_train(decoder, encoder, data, val_ep, tcfg, extra_config={"kept_labels": list(kept)})
    ckpt_io.save(out / f"{tag}.ckpt", res.best)
    ckpt_io.save(out / f"{tag}_final.ckpt", res.final)
    log_doc = {"history": res.history, "stopped_early": res.stopped_early, "kept_labels": list(kept),
               "n_train": len(data), "n_val": len(val_ep), "n_parameters": decoder.n_parameters()}
    (out / f"{tag}_log.json").write_text(json.dumps(log_doc, indent=2, sort_keys=True) + "\n")
    return log_doc


def ep_step_outputs(decoder: EPredictor, encoder: CarFormer, seqs: Sequence[EventSequence],
                    zero_memory: bool = False, batch_size: int = 16) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-sequence (probs (L, N), dt_pred (L,)) from the decoder."""
    feats = encode_sequences(encoder, seqs)
    out = []
    with T.no_grad():
        for k in range(0, len(seqs), batch_size):
            part = seqs[k:k + batch_size]
            batch = make_batch(part, decoder.cfg.n_labels)
            o = ep_forward(decoder, encoder, batch, feats[k:k + batch_size], zero_memory)
            for b, n in enumerate(batch.lengths):
                out.append((o.probs.data[b, :n].copy(), o.dt_pred.data[b, :n].copy()))
    return out


def ep_metrics(decoder: EPredictor, seqs: Sequence[EventSequence],
               outputs: Sequence[tuple[np.ndarray, np.ndarray]], ecfg: dict) -> tuple[dict, list]:
    """Pooled metrics, per-step curves and CPMW reports for decoded test sequences."""
    cfg = decoder.cfg
    c, thr = cfg.min_context, cfg.threshold
    f1_records, mae_records = [], []
    tp = fp = fn = 0
    dt_pred_all, dt_true_all, per_seq = [], [], []
    for s, (probs, dt) in zip(seqs, outputs):
        y = s.label_vector(cfg.n_labels)
        target = ep_time_targets(s.times[None], np.array([len(s)]), cfg.time_base)[0]
        for i in range(c, len(s)):
            counts = confusion_counts(probs[i][None], y, thr)
            f1_records.append((i, *counts))
            tp, fp, fn = tp + counts[0], fp + counts[1], fn + counts[2]
            mae_records.append((i, abs(dt[i] - target[i])))
        dt_pred_all.append(dt[c:])
        dt_true_all.append(target[c:])
        per_seq.append((dt[c:], target[c:]))
    pred, true = np.concatenate(dt_pred_all), np.concatenate(dt_true_all)
    mape_val, skipped = mape(pred, true)
    f1_curve = build_curve(f1_records, "f1", c)
    mae_curve = build_curve(mae_records, "mae", c)
    mu_seq = float(np.mean([len(s) for s in seqs]))
    rep_f1 = cpmw(f1_curve, ecfg["theta"], mu_seq, ecfg["delta"], "above", ecfg["debounce"])
    rep_mae = cpmw(mae_curve, ecfg["mae_theta"], mu_seq, ecfg["delta"], "below", ecfg["debounce"])
    hours = mae_hours_summary(per_seq, cfg.time_base)
    metrics = {
        "variant": cfg.variant,
        "f1": f1_from_counts(tp, fp, fn),
        "tp": tp, "fp": fp, "fn": fn,
        "mape": mape_val,
        "mape_skipped_zero_targets": skipped,
        "mae": mae(pred, true),
        "rmse": rmse(pred, true),
        "mae_h": hours["mae_h"],
        "mae_h_std": hours["std_h"],
        "f1_slope": weighted_slope(f1_curve),
        "mu_seq": mu_seq,
        "cpmw_f1": rep_f1.to_dict(),
        "cpmw_mae": rep_mae.to_dict(),
        "n_sequences": len(seqs),
        "n_steps": int(pred.size),
        "threshold": thr,
        "min_context": c,
    }
    return metrics, [f1_curve, mae_curve]


def eval_ep(cfg: dict, ckpt_path: str | Path, data_dir: str | Path, out_dir: str | Path | None = None,
            split: str = "test", tag: str = "ep_eval") -> dict:
    ck = ckpt_io.load(ckpt_path)
    decoder, encoder = load_epredictor(ck)
    kept = ck.config["kept_labels"]
    seqs = remap_labels(load_split(data_dir, split)[0], kept, decoder.cfg.min_context + 1)
    if not seqs:
        raise ValueError(f"no labelled {split} sequences longer than the minimum context")
    outputs = ep_step_outputs(decoder, encoder, seqs)
    metrics, curves = ep_metrics(decoder, seqs, outputs, cfg["eval"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{tag}.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        write_curves_csv(out / f"{tag}_curves.csv", curves)
    return metrics


def cross_path_delta(ckpt_path: str | Path, data_dir: str | Path, split: str = "test",
                     limit: int = 64) -> float:
    """Largest change in any probability when the encoder memory is replaced by zeros."""
    ck = ckpt_io.load(ckpt_path)
    decoder, encoder = load_epredictor(ck)
    seqs = remap_labels(load_split(data_dir, split)[0], ck.config["kept_labels"],
                        decoder.cfg.min_context + 1)[:limit]
    base = ep_step_outputs(decoder, encoder, seqs)
    ablated = ep_step_outputs(decoder, encoder, seqs, zero_memory=True)
    return float(max(np.max(np.abs(a[0] - b[0])) for a, b in zip(base, ablated)))


# ablations

EP_TABLE = ["variant", "f1", "mape", "mae", "cpmwauc_up", "cpmwauc_down", "cross_delta"]
CAR_TABLE = ["variant", "acc", "mape", "rmse"]


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def ablate(cfg: dict, data_dir: str | Path, backbone_ckpt: str | Path | None, out_dir: str | Path,
           variants: Sequence[str] | None = None) -> dict:
    """Train and evaluate each named variant; write CSV and Markdown comparison tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = list(variants or cfg["ablate"]["variants"])
    ep_rows, car_rows = [], []
    for v in variants:
        vdir = out / v
        if v in EP_VARIANTS:
            if backbone_ckpt is None:
                raise ConfigError("EPredictor ablations need a pretrained backbone checkpoint")
            train_ep(cfg, data_dir, backbone_ckpt, vdir, variant=v)
            m = eval_ep(cfg, vdir / "epredictor.ckpt", data_dir, vdir)
            ep_rows.append({
                "variant": v, "f1": m["f1"], "mape": m["mape"], "mae": m["mae"],
                "cpmwauc_up": m["cpmw_f1"]["auc_normalized"], "cpmwauc_down": m["cpmw_mae"]["auc_normalized"],
                "cross_delta": cross_path_delta(vdir / "epredictor.ckpt", data_dir),
            })
        elif v in CARFORMER_VARIANTS:
            pretrain(cfg, data_dir, vdir, variant=v)
            m = eval_pretrain(vdir / "carformer_best.ckpt", data_dir, eval_seed=cfg["eval"]["eval_seed"])
            car_rows.append({"variant": v, "acc": m["acc"], "mape": m["mape"], "rmse": m["rmse"]})
        else:
            raise ConfigError(f"unknown variant {v!r}")
        log.info("ablation %s done", v)
    lines = []
    for cols, rows, title in ((CAR_TABLE, car_rows, "CarFormer variants"), (EP_TABLE, ep_rows, "EPredictor variants")):
        if not rows:
            continue
        with open(out / f"ablation_{'carformer' if cols is CAR_TABLE else 'epredictor'}.csv", "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
        lines += [f"### {title}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in rows]
        lines.append("")
    (out / "ablation.md").write_text("\n".join(lines))
    return {"carformer": car_rows, "epredictor": ep_rows}


def run_pipeline(cfg: dict, out_dir: str | Path) -> dict:
    """gen-data, pretrain, train-ep, eval-pretrain and eval-ep into one directory."""
    out = Path(out_dir)
    data = out / "data"
    gen_data(cfg, data)
    pretrain(cfg, data, out / "pretrain")
    backbone = out / "pretrain" / "carformer_best.ckpt"
    pre_metrics = eval_pretrain(backbone, data, eval_seed=cfg["eval"]["eval_seed"])
    (out / "pretrain" / "eval.json").write_text(json.dumps(pre_metrics, indent=2, sort_keys=True) + "\n")
    train_ep(cfg, data, backbone, out / "ep")
    ep_m = eval_ep(cfg, out / "ep" / "epredictor.ckpt", data, out / "ep")
    return {"pretrain": pre_metrics, "ep": ep_m}
