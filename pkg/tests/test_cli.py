import json
from pathlib import Path

import numpy as np
import pytest

from dtcformer import cli
from dtcformer import pipeline as pl
from dtcformer.decoder import InsufficientContextError
from dtcformer.metrics import MetricCurve, cpmw, write_curves_csv
from dtcformer.training import NonFiniteError

CONFIG = str(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
TINY = [
    "data.n_sequences=150", "carformer.d_model=16", "carformer.n_heads=2", "carformer.n_layers=1",
    "pretrain.epochs=1", "pretrain.warmup_steps=2", "ep_train.epochs=1", "ep_train.warmup_steps=2",
    "data.resample.theta1=5", "data.resample.theta2=20", "data.resample.min_count=2",
]


def run(*argv, overrides=TINY, config=True):
    args = [argv[0]]
    if config:
        args += ["--config", CONFIG]
        for o in overrides:
            args += ["--set", o]
    return cli.main(["--log-level", "WARNING", *args, *argv[1:]])


def last_error(capsys) -> dict:
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d, p, e = root / "data", root / "pre", root / "ep"
    assert run("gen-data", "--out", str(d)) == 0
    assert run("pretrain", "--data", str(d), "--out", str(p)) == 0
    assert run("train-ep", "--data", str(d), "--backbone", str(p / "carformer_best.ckpt"), "--out", str(e)) == 0
    return root


class TestStages:
    def test_outputs_written(self, chain):
        assert {"train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "dataset.json"} <= {
            f.name for f in (chain / "data").iterdir()}
        assert (chain / "pre" / "carformer_best.ckpt").exists()
        assert (chain / "ep" / "epredictor.ckpt").exists()

    def test_manifest_contents(self, chain):
        doc = json.loads((chain / "pre" / "manifest.json").read_text())
        assert doc["command"] == "pretrain" and doc["seed"] == 0
        assert doc["config"]["carformer"]["d_model"] == 16
        assert doc["deterministic"] == "1"
        for path, digest in doc["outputs"].items():
            assert cli.sha256_file(Path(path)) == digest
        assert any(k.endswith("train.jsonl") for k in doc["inputs"])
        assert not any(k.endswith("manifest.json") for k in doc["outputs"])

    def test_eval_pretrain(self, chain, capsys):
        out = chain / "evp"
        assert run("eval-pretrain", "--ckpt", str(chain / "pre" / "carformer_best.ckpt"),
                   "--data", str(chain / "data"), "--out", str(out)) == 0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        saved = json.loads((out / "eval_pretrain.json").read_text())
        assert printed["acc"] == saved["acc"]
        assert 0.0 <= saved["acc"] <= 1.0

    def test_eval_ep_and_curves(self, chain, capsys):
        out = chain / "eve"
        assert run("eval-ep", "--ckpt", str(chain / "ep" / "epredictor.ckpt"), "--data", str(chain / "data"),
                   "--emit-curves", str(out), "--theta", "0.5") == 0
        metrics = json.loads((out / "ep_eval.json").read_text())
        assert metrics["cpmw_f1"]["theta"] == 0.5
        assert (out / "ep_eval_curves.csv").exists()
        capsys.readouterr()
        assert run("curves", "--curves", str(out / "ep_eval_curves.csv"), "--metric", "mae", "--theta", "0.3",
                   "--mu-seq", str(metrics["mu_seq"]), "--delta", "2", "--out", str(out / "c"),
                   config=False) == 0
        rep = json.loads((out / "c" / "cpmw_mae.json").read_text())
        assert rep == metrics["cpmw_mae"]


class TestCurvesCommand:
    def test_matches_library(self, tmp_path):
        x = np.arange(8, 60)
        curve = MetricCurve("f1", x, np.clip((x - 8) / 30, 0, 1), np.ones_like(x))
        write_curves_csv(tmp_path / "c.csv", [curve])
        assert run("curves", "--curves", str(tmp_path / "c.csv"), "--theta", "0.8", "--mu-seq", "40",
                   "--delta", "4", "--out", str(tmp_path / "o"), config=False) == 0
        got = json.loads((tmp_path / "o" / "cpmw_f1.json").read_text())
        assert got == cpmw(curve, 0.8, 40, 4, "above", 3).to_dict()
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"] is None and manifest["command"] == "curves"

    def test_unknown_metric_is_data_error(self, tmp_path, capsys):
        write_curves_csv(tmp_path / "c.csv", [MetricCurve("f1", [1, 2], [0, 1], [1, 1])])
        code = run("curves", "--curves", str(tmp_path / "c.csv"), "--metric", "acc", "--theta", "0.5",
                   "--mu-seq", "2", "--out", str(tmp_path / "o"), config=False)
        assert code == 3 and last_error(capsys)["error"] == "data"


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        assert run("gen-data", "--out", str(tmp_path), overrides=["data.generator.colour=1"]) == 2
        err = last_error(capsys)
        assert err == {"error": "config", "message": err["message"], "exit_code": 2}
        assert "colour" in err["message"]

    def test_unreadable_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: [1, 2\n")
        assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert last_error(capsys)["exit_code"] == 2

    def test_warmup_longer_than_run(self, chain, tmp_path, capsys):
        code = run("pretrain", "--data", str(chain / "data"), "--out", str(tmp_path),
                   overrides=TINY + ["pretrain.warmup_steps=100000"])
        assert code == 2 and "warmup" in last_error(capsys)["message"]

    def test_missing_data(self, tmp_path, capsys):
        assert run("pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")) == 3
        assert last_error(capsys)["error"] == "data"

    def test_corrupt_checkpoint(self, chain, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        raw = bytearray((chain / "pre" / "carformer_best.ckpt").read_bytes())
        raw[-3] ^= 0xFF
        bad.write_bytes(bytes(raw))
        code = run("eval-pretrain", "--ckpt", str(bad), "--data", str(chain / "data"), "--out", str(tmp_path))
        assert code == 3 and last_error(capsys)["error"] == "data"

    def test_nonfinite_maps_to_4(self, monkeypatch, tmp_path, capsys):
        def boom(*a, **k):
            raise NonFiniteError("loss is nan at step 3")
        monkeypatch.setattr(pl, "pretrain", boom)
        assert run("pretrain", "--data", str(tmp_path), "--out", str(tmp_path)) == 4
        assert last_error(capsys) == {"error": "numeric", "message": "loss is nan at step 3", "exit_code": 4}

    def test_insufficient_context_maps_to_5(self, monkeypatch, tmp_path, capsys):
        def short(*a, **k):
            raise InsufficientContextError("sequence of 3 events, need more than 8")
        monkeypatch.setattr(pl, "eval_ep", short)
        code = run("eval-ep", "--ckpt", "x", "--data", str(tmp_path), "--emit-curves", str(tmp_path))
        assert code == 5 and last_error(capsys)["error"] == "insufficient_context"

    def test_error_is_single_json_line(self, tmp_path, capsys):
        run("pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
        lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("{")]
        assert len(lines) == 1 and set(json.loads(lines[0])) == {"error", "message", "exit_code"}

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["eval-ep", "--ckpt", "x", "--data", "y"])
        assert info.value.code == 2


def test_ablate_writes_tables(chain, tmp_path, capsys):
    code = run("ablate", "--data", str(chain / "data"), "--backbone", str(chain / "pre" / "carformer_best.ckpt"),
               "--out", str(tmp_path), "--variants", "rotnocross-ce-1-2", "cross-mixffn")
    assert code == 0
    lines = (tmp_path / "ablation_epredictor.csv").read_text().splitlines()
    assert lines[0].split(",") == pl.EP_TABLE
    rows = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
    assert float(rows["rotnocross-ce-1-2"][-1]) == 0.0
    assert float(rows["cross-mixffn"][-1]) > 0.0
    assert "| variant |" in capsys.readouterr().out
