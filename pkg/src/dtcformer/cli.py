"""Command-line entry point: ``dtcformer <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 insufficient context. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from . import DETERMINISTIC_ENV
from . import pipeline as pl
from .checkpoint import CheckpointError
from .decoder import InsufficientContextError
from .events import DataError
from .metrics import cpmw, read_curves_csv
from .training import NonFiniteError, ScheduleError

log = logging.getLogger("dtcformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CONTEXT = 0, 2, 3, 4, 5


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths: Sequence[Path], skip: Path | None = None) -> dict[str, str]:
    out = {}
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            if skip is not None and f.resolve() == skip.resolve():
                continue
            out[str(f)] = sha256_file(f)
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, cfg: dict | None,
                   inputs: Sequence[Path], started: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    doc = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": cfg,
        "seed": None if cfg is None else cfg["seed"],
        "deterministic": os.environ.get(DETERMINISTIC_ENV, "0"),
        "inputs": _hash_tree([p for p in inputs if p is not None and Path(p).exists()]),
        "outputs": _hash_tree([out_dir], skip=path),
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _config(args) -> dict:
    return pl.load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def _data_inputs(data: str) -> list[Path]:
    d = Path(data)
    return [d / n for n in ("vocab.json", "dataset.json", "train.jsonl", "val.jsonl", "test.jsonl")]


def cmd_gen_data(args):
    cfg = _config(args)
    info = pl.gen_data(cfg, args.out)
    print(json.dumps({"counts": info["counts"], "n_labels": info["n_labels"]}))
    return cfg, [Path(args.config)] if args.config else [], Path(args.out)


def cmd_pretrain(args):
    cfg = _config(args)
    doc = pl.pretrain(cfg, args.data, args.out, variant=args.variant)
    print(json.dumps({"final_val_loss": doc["history"][-1]["val_loss"] if doc["history"] else None}))
    return cfg, _data_inputs(args.data), Path(args.out)


def cmd_train_ep(args):
    cfg = _config(args)
    doc = pl.train_ep(cfg, args.data, args.backbone, args.out, variant=args.variant)
    print(json.dumps({"epochs": len(doc["history"]), "stopped_early": doc["stopped_early"]}))
    return cfg, _data_inputs(args.data) + [Path(args.backbone)], Path(args.out)


def cmd_eval_pretrain(args):
    cfg = _config(args)
    m = pl.eval_pretrain(args.ckpt, args.data, args.split, eval_seed=cfg["eval"]["eval_seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_pretrain.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: m[k] for k in ("acc", "majority_acc", "mape", "rmse")}))
    return cfg, _data_inputs(args.data) + [Path(args.ckpt)], out


def cmd_eval_ep(args):
    cfg = _config(args)
    if args.theta is not None:
        cfg["eval"]["theta"] = args.theta
    if args.delta is not None:
        cfg["eval"]["delta"] = args.delta
    m = pl.eval_ep(cfg, args.ckpt, args.data, args.emit_curves, args.split)
    print(json.dumps({k: m[k] for k in ("f1", "mape", "mae", "mae_h", "mae_h_std")}))
    return cfg, _data_inputs(args.data) + [Path(args.ckpt)], Path(args.emit_curves)


def cmd_curves(args):
    curves = read_curves_csv(args.curves)
    if args.metric not in curves:
        raise DataError(f"metric {args.metric!r} not in {sorted(curves)}")
    direction = args.direction or ("above" if args.metric == "f1" else "below")
    rep = cpmw(curves[args.metric], args.theta, args.mu_seq, args.delta, direction, args.debounce)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"cpmw_{args.metric}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(rep.to_dict()))
    return None, [Path(args.curves)], out


def cmd_ablate(args):
    cfg = _config(args)
    pl.ablate(cfg, args.data, args.backbone, args.out, args.variants)
    print((Path(args.out) / "ablation.md").read_text())
    inputs = _data_inputs(args.data) + ([Path(args.backbone)] if args.backbone else [])
    return cfg, inputs, Path(args.out)


def cmd_pipeline(args):
    cfg = _config(args)
    res = pl.run_pipeline(cfg, args.out)
    print(json.dumps({"acc": res["pretrain"]["acc"], "majority_acc": res["pretrain"]["majority_acc"],
                      "f1": res["ep"]["f1"], "f1_slope": res["ep"]["f1_slope"]}))
    return cfg, [Path(args.config)] if args.config else [], Path(args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtcformer", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help_: str, config: bool = True) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="YAML config (see configs/desk.yaml)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config value, e.g. pretrain.epochs=2")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic fleet and write JSONL splits")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "pretrain CarFormer")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant")

    sp = add("train-ep", cmd_train_ep, "train EPredictor on a frozen backbone")
    sp.add_argument("--data", required=True)
    sp.add_argument("--backbone", required=True, help="CarFormer checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant")

    sp = add("eval-pretrain", cmd_eval_pretrain, "next-event accuracy and next-time errors")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)

    sp = add("eval-ep", cmd_eval_ep, "EP metrics, per-observation curves and CPMW reports")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--theta", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--emit-curves", required=True, metavar="DIR")

    sp = add("curves", cmd_curves, "CPMW report from a curve CSV", config=False)
    sp.add_argument("--curves", required=True)
    sp.add_argument("--metric", default="f1")
    sp.add_argument("--theta", type=float, required=True)
    sp.add_argument("--mu-seq", type=float, required=True)
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--direction", choices=["above", "below"])
    sp.add_argument("--debounce", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "train and compare a list of variants")
    sp.add_argument("--data", required=True)
    sp.add_argument("--backbone", help="CarFormer checkpoint (needed for EPredictor variants)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", nargs="+")

    sp = add("pipeline", cmd_pipeline, "gen-data, pretrain, train-ep and both evaluations")
    sp.add_argument("--out", required=True)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    sys.stderr.write(json.dumps({"error": kind, "message": msg, "exit_code": code}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        cfg, inputs, out = args.func(args)
        write_manifest(out, args.command, args, cfg, inputs, started)
    except (pl.ConfigError, ScheduleError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except InsufficientContextError as exc:
        return _fail(EXIT_CONTEXT, "insufficient_context", exc)
    except (DataError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
