import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from forgetprobe.errors import AggregationError, FormatError, InputError
from forgetprobe.metrics import (COLUMNS, MetricRecord, aggregate, format_value, mean_std, read_many,
                                 read_metrics, write_metrics)


def random_records(n, seed=0):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        metric = rng.choice(["accuracy", "cka", "recon_loss", "train_loss"])
        value = rng.random() if metric in ("accuracy", "cka") else rng.expovariate(0.1)
        out.append(MetricRecord(rng.choice(["e1", "e2", "e3", "e4"]), rng.choice(["autoencoder", "vae"]),
                                rng.choice(["mnist", "fashion"]), rng.randint(1, 5), rng.randint(0, 5),
                                rng.randint(0, 100), metric, value))
    return out


def test_roundtrip_1000_records(tmp_path):
    recs = random_records(1000)
    back = read_metrics(write_metrics(recs, tmp_path / "m.csv"))
    assert len(back) == 1000
    for a, b in zip(recs, back):
        assert (a.experiment, a.model, a.dataset, a.seed, a.task, a.epoch, a.metric) == \
            (b.experiment, b.model, b.dataset, b.seed, b.task, b.epoch, b.metric)
        assert b.value == pytest.approx(a.value, rel=5e-6)


def test_six_significant_digits_and_crlf(tmp_path):
    p = write_metrics([MetricRecord("e1", "vae", "mnist", 1, 1, 1, "accuracy", 0.123456789)], tmp_path / "m.csv")
    raw = p.read_bytes()
    assert raw.startswith(",".join(COLUMNS).encode() + b"\r\n")
    assert b"0.123457\r\n" in raw
    assert format_value(123456789.0) == "1.23457e+08"


def test_empty_is_header_only(tmp_path):
    p = write_metrics([], tmp_path / "e.csv")
    assert p.read_bytes() == (",".join(COLUMNS) + "\r\n").encode()
    assert read_metrics(p) == []


def test_malformed_row_names_line(tmp_path):
    p = write_metrics(random_records(3), tmp_path / "m.csv")
    with open(p, "a", newline="") as fh:
        fh.write("e1,vae,mnist,1,1,x,accuracy,0.5\r\n")
    with pytest.raises(FormatError, match="line 5"):
        read_metrics(p)
    (tmp_path / "short.csv").write_text(",".join(COLUMNS) + "\r\ne1,vae\r\n", newline="")
    with pytest.raises(FormatError, match="line 2"):
        read_metrics(tmp_path / "short.csv")
    (tmp_path / "hdr.csv").write_text("a,b\r\n", newline="")
    with pytest.raises(FormatError, match="line 1"):
        read_metrics(tmp_path / "hdr.csv")


def test_read_missing_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.csv"):
        read_metrics(tmp_path / "nope.csv")


def test_read_many_concatenates(tmp_path):
    a = write_metrics(random_records(4, 1), tmp_path / "a.csv")
    b = write_metrics(random_records(5, 2), tmp_path / "b.csv")
    assert len(read_many([a, b])) == 9


def test_range_checks():
    with pytest.raises(InputError):
        MetricRecord("e1", "d", "mnist", 1, 1, 1, "accuracy", 1.5).check()
    with pytest.raises(InputError):
        MetricRecord("e4", "d", "mnist", 1, 1, 1, "recon_loss", -1.0).check()
    with pytest.raises(InputError):
        MetricRecord("e4", "d", "mnist", 1, 1, 1, "recon_loss", math.nan).check()


def test_aggregate_examples():
    assert mean_std([0.5]) == (0.5, 0.0)
    m, s = mean_std([0.9, 1.1])
    assert m == pytest.approx(1.0) and s == pytest.approx(0.1)
    with pytest.raises(AggregationError):
        mean_std([])
    with pytest.raises(AggregationError):
        aggregate([])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_aggregate_order_independent(seed):
    recs = random_records(60, seed)
    shuffled = list(recs)
    random.Random(seed + 1).shuffle(shuffled)
    a, b = aggregate(recs), aggregate(shuffled)
    assert a == b
    for r in a:
        assert r.std >= 0 and r.n_runs >= 1
