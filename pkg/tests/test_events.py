import json

import numpy as np
import pytest

from dtcformer.events import (
    N_RESERVED, UNK_ID, DataError, DTCParseError, EmptyWindowError, Event, EventSequence, Vocabulary,
    parse_dtc, read_jsonl, scale_time, unscale_time, window_sequence, write_jsonl,
)


class TestTimeTransform:
    def test_anchor_values(self):
        assert scale_time(9.0, 10) == pytest.approx(0.0, abs=1e-15)
        assert scale_time(0.0, 10) == -1.0
        assert unscale_time(1.0, 30) == 899.0
        assert unscale_time(0.0, 10) == 9.0
        assert scale_time(899.0, 30) == pytest.approx(1.0, rel=1e-13)

    @pytest.mark.parametrize("base", [10.0, 30.0])
    def test_roundtrip(self, base):
        t = np.random.default_rng(0).uniform(0, 1e4, 1000)
        np.testing.assert_allclose(unscale_time(scale_time(t, base), base), t, rtol=1e-12, atol=1e-9)

    def test_monotone(self):
        t = np.linspace(0, 1000, 101)
        assert np.all(np.diff(scale_time(t, 10)) > 0)

    def test_rejects_negative_time_and_bad_base(self):
        with pytest.raises(ValueError):
            scale_time(-1.0, 10)
        with pytest.raises(ValueError):
            scale_time(1.0, 1.0)
        with pytest.raises(ValueError):
            unscale_time(0.0, 0.5)

    def test_array_and_scalar_types(self):
        assert isinstance(scale_time(3.0, 10), float)
        assert scale_time(np.array([1.0, 2.0]), 10).shape == (2,)


class TestWindow:
    HOUR = 3600.0

    def test_bounds_are_inclusive(self):
        raw = [(4, 0.0, 0.0), (5, 1.0 * self.HOUR, 10.0), (6, 721.0 * self.HOUR, 20.0)]
        seq = window_sequence(raw, "v")
        # event 1 lies exactly 720 h before the last one and is kept, event 0 is 721 h away
        assert [e.token for e in seq.events] == [5, 6]
        raw[0] = (4, 1.0 * self.HOUR, 0.0)
        assert len(window_sequence(raw, "v")) == 3
        raw[0] = (4, 0.999 * self.HOUR, 0.0)
        assert len(window_sequence(raw, "v")) == 2

    def test_mileage_bound(self):
        raw = [(4, 0.0, 0.0), (5, 10.0, 0.5), (6, 20.0, 300.5)]
        seq = window_sequence(raw, "v")
        assert [e.token for e in seq.events] == [5, 6]
        assert seq.events[0].m == 0.0 and seq.events[1].m == pytest.approx(300.0)

    def test_rebased_to_zero(self):
        raw = [(4, 1000.0, 55.0), (5, 1000.0 + 7200.0, 56.5)]
        seq = window_sequence(raw, "v")
        assert seq.events[0].t == 0.0 and seq.events[0].m == 0.0
        assert seq.events[1].t == pytest.approx(2.0)
        seq.validate()

    def test_errors(self):
        with pytest.raises(EmptyWindowError):
            window_sequence([], "v")
        with pytest.raises(DataError, match="sorted"):
            window_sequence([(4, 10.0, 0.0), (5, 0.0, 0.0)], "v")
        with pytest.raises(DataError, match="backwards"):
            window_sequence([(4, 0.0, 10.0), (5, 10.0, 5.0)], "v")


class TestSequence:
    def test_validate(self):
        good = EventSequence("v", (Event(4, 0, 0), Event(5, 1, 1)))
        good.validate(vocab_size=6)
        with pytest.raises(DataError, match="t=0"):
            EventSequence("v", (Event(4, 1, 0),)).validate()
        with pytest.raises(DataError, match="sorted"):
            EventSequence("v", (Event(4, 0, 0), Event(4, 3, 0), Event(4, 2, 0))).validate()
        with pytest.raises(DataError, match="vocabulary"):
            good.validate(vocab_size=5)
        with pytest.raises(DataError):
            EventSequence("v", ()).validate()

    def test_event_rejects_nonfinite(self):
        with pytest.raises(DataError):
            Event(4, float("nan"), 0.0)
        with pytest.raises(DataError):
            Event(4, 0.0, -1.0)

    def test_labels_normalised(self):
        s = EventSequence("v", (Event(4, 0, 0),), (3, 1, 3))
        assert s.labels == (1, 3)
        np.testing.assert_array_equal(s.label_vector(4), [0, 1, 0, 1])

    def test_rebased_slice(self):
        s = EventSequence("v", (Event(4, 0, 0), Event(5, 2, 3), Event(6, 5, 4)))
        r = s.rebased(1)
        assert [(e.t, e.m) for e in r.events] == [(0, 0), (3, 1)]
        with pytest.raises(EmptyWindowError):
            s.rebased(3)


class TestVocabulary:
    def test_reserved_prefix_and_unknown(self):
        v = Vocabulary.build(["1|P0001|0", "2|C0002|1", "1|P0001|0"])
        assert len(v) == N_RESERVED + 2
        assert v.encode("2|C0002|1") == N_RESERVED + 1
        assert v.encode("9|U9999|0") == UNK_ID
        assert v.decode(N_RESERVED) == "1|P0001|0"

    def test_parse(self):
        assert parse_dtc("7|B1234|1") == ("7", "B1234", "1")
        for bad in ("7|B1234", "7||1", "a|b|c|d"):
            with pytest.raises(DTCParseError):
                parse_dtc(bad)

    def test_json_roundtrip(self, tmp_path):
        v = Vocabulary.build([f"{i}|P{i:04d}|0" for i in range(10)])
        v.save(tmp_path / "vocab.json")
        assert Vocabulary.load(tmp_path / "vocab.json").tokens == v.tokens

    def test_non_dense_rejected(self):
        doc = Vocabulary.build(["1|P0001|0"]).to_json()
        doc["tokens"]["1|P0001|0"] = 9
        with pytest.raises(DataError, match="dense"):
            Vocabulary.from_json(doc)


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        v = Vocabulary.build(["1|P0001|0", "2|P0002|0"])
        seqs = [
            EventSequence("a", (Event(4, 0, 0), Event(5, 1.5, 0.25, True)), (0, 2)),
            EventSequence("b", (Event(5, 0, 0),), None),
        ]
        write_jsonl(tmp_path / "x.jsonl", seqs, v)
        assert read_jsonl(tmp_path / "x.jsonl", v) == seqs

    def test_bad_line_reports_location(self, tmp_path):
        v = Vocabulary()
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"vehicle_id": "a", "events": []}) + "\n{oops\n")
        with pytest.raises(DataError):
            read_jsonl(p, v)
        p.write_text("{oops\n")
        with pytest.raises(DataError, match=":1:"):
            read_jsonl(p, v)

    def test_missing_field(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"events": []}) + "\n")
        with pytest.raises(DataError, match="bad sequence"):
            read_jsonl(p, Vocabulary())
