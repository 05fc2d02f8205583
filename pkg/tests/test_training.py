import math

import numpy as np
import pytest

from dtcformer import checkpoint as ckpt_io
from dtcformer import tensor as T
from dtcformer.checkpoint import Checkpoint, CheckpointError
from dtcformer.decoder import EPredictor, EPredictorConfig
from dtcformer.encoder import CarFormer, CarFormerConfig
from dtcformer.layers import Linear, Module, RMSNorm, init_weights
from dtcformer.pipeline import split_by_vehicle
from dtcformer.synth import GeneratorConfig, generate_fleet
from dtcformer.training import (
    AdamW, NonFiniteError, TrainConfig, _fit, clip_grad_norm, load_carformer, load_epredictor, lr_at,
    pretrain_eval_loss, run_ep_train, run_pretrain,
)
from conftest import random_sequence


class _Wide(Module):
    def __init__(self):
        self.lin = Linear(600, 600)
        self.ffn = Linear(600, 600, law="ffn")
        self.norm = RMSNorm(600)


class TestInit:
    def test_smallinit_std(self):
        m = _Wide()
        init_weights(m, np.random.default_rng(0), n_layers=6)
        target = math.sqrt(2.0 / (5 * 600))
        assert abs(m.lin.weight.data.std() / target - 1) < 0.05
        assert abs(m.ffn.weight.data.std() / (2.0 / (6 * math.sqrt(600))) - 1) < 0.05
        assert np.all(m.lin.bias.data == 0.0) and np.all(m.norm.gain.data == 1.0)

    def test_same_seed_same_params(self):
        a = CarFormer(CarFormerConfig(vocab_size=30, d_model=16, n_heads=2), seed=7)
        b = CarFormer(CarFormerConfig(vocab_size=30, d_model=16, n_heads=2), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)


class TestSchedule:
    cfg = TrainConfig(lr=1e-3, warmup_steps=10, min_lr=0.0)

    def test_warmup_endpoints(self):
        assert lr_at(0, self.cfg, 100) == 0.0
        assert lr_at(10, self.cfg, 100) == 1e-3
        assert lr_at(5, self.cfg, 100) == pytest.approx(5e-4)

    def test_continuous_at_warmup(self):
        left = self.cfg.lr * (10 - 1e-9) / 10
        assert abs(lr_at(10, self.cfg, 100) - left) < 1e-12

    def test_cosine_decay_and_restarts(self):
        assert lr_at(55, self.cfg, 100) == pytest.approx(5e-4)
        assert lr_at(99, self.cfg, 100) < 1e-5
        cfg = TrainConfig(lr=1e-3, warmup_steps=10, restarts=1)
        assert lr_at(55, cfg, 100) == pytest.approx(1e-3)
        assert lr_at(54, cfg, 100) < 1e-5

    def test_errors(self):
        with pytest.raises(ValueError):
            lr_at(-1, self.cfg, 100)
        with pytest.raises(ValueError, match="warmup"):
            lr_at(0, self.cfg, 10)


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = T.parameter(np.ones((2, 2)))
        opt = AdamW([("w", p)], weight_decay=0.0)
        p.grad = np.zeros((2, 2))
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, 1.0)

    def test_zero_grad_decay_shrinks_matrices_only(self):
        w, b = T.parameter(np.ones((2, 2))), T.parameter(np.ones(2))
        opt = AdamW([("w", w), ("b", b)], weight_decay=0.1)
        w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
        opt.step(0.01)
        np.testing.assert_allclose(w.data, 1.0 - 0.01 * 0.1, rtol=1e-15)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_quadratic_converges(self):
        x = T.parameter(np.array([5.0]))
        opt = AdamW([("x", x)], weight_decay=0.0)
        for _ in range(500):
            x.grad = 2.0 * (x.data - 1.5)
            opt.step(0.05)
        assert abs(x.data[0] - 1.5) < 1e-3

    def test_first_step_size_is_lr(self):
        x = T.parameter(np.array([0.0, 0.0]))
        opt = AdamW([("x", x)], weight_decay=0.0)
        x.grad = np.array([3.0, -0.2])
        opt.step(0.01)
        np.testing.assert_allclose(x.data, [-0.01, 0.01], rtol=1e-6)

    def test_nonfinite_gradient(self):
        x = T.parameter(np.zeros(1))
        x.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError):
            AdamW([("x", x)]).step(0.1)

    def test_clip(self):
        a, b = T.parameter(np.zeros(2)), T.parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8])
        a.grad = np.array([0.1, 0.0])
        b.grad = np.array([0.0])
        clip_grad_norm([a, b], 1.0)
        np.testing.assert_array_equal(a.grad, [0.1, 0.0])
        a.grad = np.array([np.inf, 0.0])
        with pytest.raises(NonFiniteError):
            clip_grad_norm([a], 1.0)


class TestCheckpoint:
    def _ck(self, rng):
        tensors = {"model/w": rng.normal(size=(3, 4)), "model/b": rng.normal(size=4), "adam.m/w": np.zeros((3, 4)),
                   "scalar": np.array(2.5)}
        return Checkpoint({"kind": "x", "lr": 1e-3}, 17, tensors, {"seed": 1, "epoch": 2}, {"note": "a"})

    def test_roundtrip_bytes(self, rng, tmp_path):
        ck = self._ck(rng)
        raw = ckpt_io.save(tmp_path / "a.ckpt", ck)
        back = ckpt_io.load(tmp_path / "a.ckpt")
        assert back.step == 17 and back.config == ck.config and back.rng_state == ck.rng_state
        for k, v in ck.tensors.items():
            np.testing.assert_array_equal(back.tensors[k], v)
            assert back.tensors[k].shape == np.shape(v)
        assert ckpt_io.save(tmp_path / "b.ckpt", back) == raw
        assert raw[:8] == b"DTCCKPT\x00"

    def test_subset(self, rng):
        assert set(self._ck(rng).subset("model/")) == {"w", "b"}

    def test_corruption_detected(self, rng):
        raw = ckpt_io.encode(self._ck(rng))
        with pytest.raises(CheckpointError):
            ckpt_io.decode(b"NOTACKPT" + raw[8:])
        with pytest.raises(CheckpointError):
            ckpt_io.decode(raw[:-8])
        bumped = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
        with pytest.raises(CheckpointError, match="version"):
            ckpt_io.decode(bumped)
        flipped = bytearray(raw)
        flipped[-3] ^= 0x01
        with pytest.raises(CheckpointError, match="checksum"):
            ckpt_io.decode(bytes(flipped))


def _toy_fleet(n=60, seed=1):
    fleet = generate_fleet(GeneratorConfig(vocab_size=60, n_error_patterns=3, mean_length=16, max_events=16,
                                           calibration_sequences=30, seed=seed, unlabeled_fraction=0.1), n * 3)
    return [s for s in fleet.sequences if len(s) >= 10][:n]


def _toy_model(seed=0):
    return CarFormer(CarFormerConfig(vocab_size=60, d_model=16, n_layers=1, n_heads=2, max_len=16), seed=seed)


class TestPretrainLoop:
    def test_resume_reproduces_next_step(self, tmp_path):
        seqs = _toy_fleet(24)
        train, val = seqs[:16], seqs[16:]
        tcfg = TrainConfig(lr=1e-3, warmup_steps=2, epochs=3, batch_size=4, seed=5)
        full = run_pretrain(_toy_model(), train, val, tcfg, stop_at=7)
        part = run_pretrain(_toy_model(), train, val, tcfg, stop_at=6)
        ckpt_io.save(tmp_path / "mid.ckpt", part.final)
        resumed = run_pretrain(_toy_model(seed=99), train, val, tcfg,
                               resume=ckpt_io.load(tmp_path / "mid.ckpt"), stop_at=7)
        assert resumed.final.step == full.final.step == 7
        assert ckpt_io.encode(resumed.final) == ckpt_io.encode(full.final)

    def test_toy_loss_drops_below_quarter(self):
        seqs = _toy_fleet(50)
        model = CarFormer(CarFormerConfig(vocab_size=60, d_model=32, n_layers=2, n_heads=2, max_len=16), seed=0)
        before = pretrain_eval_loss(model, seqs, 10, seed=0)
        tcfg = TrainConfig(lr=3e-3, warmup_steps=20, epochs=40, batch_size=10, weight_decay=0.0)
        run_pretrain(model, seqs, seqs[:10], tcfg)
        after = pretrain_eval_loss(model, seqs, 10, seed=0)
        assert after < 0.25 * before

    def test_short_sequences_rejected(self, rng):
        short = [random_sequence(rng, 2, 60)]
        with pytest.raises(ValueError, match="at least 3"):
            run_pretrain(_toy_model(), short, short, TrainConfig())


def _quadratic_fit(vals, patience, early=True, epochs=20):
    x = T.parameter(np.array([1.0]))
    it = iter(vals)

    def snapshot(step, meta, opt):
        return Checkpoint({}, step, {"model/x": x.data.copy()}, {}, meta)

    return _fit([("x", x)], 4, lambda e, idx: idx, lambda b: (T.tsum(T.mul(x, x)), {}), lambda: next(it),
                snapshot, TrainConfig(epochs=epochs, batch_size=2, warmup_steps=1, patience=patience,
                                      early_stopping=early), None, None)


class TestEarlyStopping:
    def test_stops_after_patience(self):
        vals = [5, 4, 3, 3.5, 3.6, 1, 1, 1, 1, 1]
        res = _quadratic_fit(vals, patience=2)
        assert res.stopped_early
        losses = [h["val_loss"] for h in res.history]
        assert len(losses) - 1 - int(np.argmin(losses)) <= 2
        assert len(losses) == 5
        assert res.best.step == 6

    def test_no_early_stop_when_disabled(self):
        vals = [5, 6, 7, 8]
        res = _quadratic_fit(vals, patience=1, early=False, epochs=4)
        assert not res.stopped_early and len(res.history) == 4
        assert res.best.step == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss(self):
        x = T.parameter(np.array([1.0]))
        with pytest.raises(NonFiniteError):
            _fit([("x", x)], 2, lambda e, i: i, lambda b: (T.tsum(T.log(T.sub(x, 2.0))), {}), lambda: 0.0,
                 lambda s, m, o: Checkpoint({}, s, {}), TrainConfig(epochs=2, batch_size=1, warmup_steps=1),
                 None, None)


class TestEPLoop:
    def test_train_and_reload(self, tmp_path):
        seqs = [s for s in _toy_fleet(40) if s.labels]
        enc = _toy_model()
        dec = EPredictor(EPredictorConfig(d_model=16, n_heads=2, n_labels=3, min_context=4), seed=0)
        tcfg = TrainConfig(lr=1e-3, warmup_steps=2, epochs=2, batch_size=8)
        res = run_ep_train(dec, enc, seqs[:24], seqs[24:], tcfg)
        assert len(res.history) == 2
        ckpt_io.save(tmp_path / "ep.ckpt", res.final)
        dec2, enc2 = load_epredictor(ckpt_io.load(tmp_path / "ep.ckpt"))
        for (n1, p1), (n2, p2) in zip(dec.named_parameters(), dec2.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)
        # frozen backbone is untouched
        for (_, p1), (_, p2) in zip(_toy_model().named_parameters(), enc2.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)
        with pytest.raises(ValueError, match="EPredictor"):
            load_epredictor(Checkpoint({"kind": "carformer"}, 0, {}))

    def test_unlabelled_rejected(self, rng):
        enc = _toy_model()
        dec = EPredictor(EPredictorConfig(d_model=16, n_heads=2, n_labels=3, min_context=4))
        seqs = [random_sequence(rng, 8, 60)]
        with pytest.raises(ValueError, match="labelled"):
            run_ep_train(dec, enc, seqs, seqs, TrainConfig())

    def test_load_carformer_roundtrip(self, tmp_path):
        seqs = _toy_fleet(12)
        model = _toy_model(3)
        res = run_pretrain(model, seqs[:8], seqs[8:], TrainConfig(warmup_steps=1, epochs=1, batch_size=4))
        back = load_carformer(ckpt_io.decode(ckpt_io.encode(res.final)))
        for (_, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)


def test_split_by_vehicle_disjoint(rng):
    seqs = [random_sequence(rng, 4, vid=f"v{i}") for i in range(50)]
    seqs += [random_sequence(rng, 4, vid=f"v{i}#dup{i}") for i in range(0, 50, 5)]
    parts = split_by_vehicle(seqs, [0.7, 0.15, 0.15], seed=0)
    ids = [{s.vehicle_id.split("#")[0] for s in p} for p in parts]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(len(p) for p in parts) == len(seqs)
    assert [len(i) for i in ids] == [35, 8, 7]
