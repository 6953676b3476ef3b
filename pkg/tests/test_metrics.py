import io
import json

from ssnet.metrics import CommMetrics


def test_epoch_counting():
    m = CommMetrics()
    m.set_op(1, "linear", 0)
    m.on_send(1, 80, 10)
    m.on_recv(1, 80, 10)
    m.on_send(1, 80, 10)  # send after recv opens a new epoch
    assert m.rounds("linear", 0) == 2


def test_consecutive_sends_one_epoch():
    m = CommMetrics()
    m.set_op(2, "reshare", 1)
    m.on_send(2, 8, 1)
    m.on_send(2, 8, 1)
    m.on_send(2, 8, 1)
    assert m.rounds("reshare", 1) == 1
    assert m.elements_sent("reshare", 1) == 3


def test_recv_before_first_send():
    m = CommMetrics()
    m.set_op(1, "trunc", 0)
    m.on_recv(1, 8, 1)
    m.on_send(1, 8, 1)
    assert m.rounds("trunc", 0) == 1


def test_rounds_is_max_over_parties():
    m = CommMetrics()
    for rank in (1, 2, 3):
        m.set_op(rank, "op", 0)
    m.on_send(1, 8, 1)
    m.on_send(2, 8, 1)
    m.on_recv(2, 8, 1)
    m.on_send(2, 8, 1)
    assert m.rounds("op", 0) == 2
    assert m.rounds("op", 99) == 0  # unknown key


def test_set_op_switches_attribution():
    m = CommMetrics()
    m.set_op(1, "linear", 0)
    m.on_send(1, 16, 2)
    m.set_op(1, "trunc", 0)
    m.on_send(1, 8, 1)
    m.set_op(1, "linear", 3)
    m.on_send(1, 32, 4)
    assert m.elements_sent("linear", 0) == 2
    assert m.elements_sent("trunc", 0) == 1
    assert m.elements_sent("linear", 3) == 4
    assert m.elements_sent("linear") == 6  # layer=None sums layers
    assert m.op_keys() == [("linear", 0), ("trunc", 0), ("linear", 3)]


def test_unlabeled_default():
    m = CommMetrics()
    m.on_send(7, 8, 1)
    assert m.elements_sent("unlabeled", -1) == 1


def test_summary_and_records():
    m = CommMetrics()
    m.set_op(1, "linear", 0)
    m.set_op(2, "linear", 0)
    m.on_send(1, 16, 2)
    m.on_send(2, 24, 3)
    m.on_recv(1, 24, 3)
    summary = m.summary()
    assert summary == [{"op": "linear", "layer": 0, "elements_sent": 5,
                        "bytes_sent": 40, "rounds": 1}]
    recs = m.records()
    assert [r["party"] for r in recs] == [1, 2]
    assert recs[0]["bytes_received"] == 24
    fh = io.StringIO()
    m.write_ndjson(fh)
    lines = fh.getvalue().strip().split("\n")
    assert len(lines) == 2
    assert json.loads(lines[0])["elements_sent"] == 2


def test_total_elements_skips_offline():
    m = CommMetrics()
    m.set_op(0, "offline", -1)
    m.on_send(0, 800, 100)
    m.set_op(1, "linear", 0)
    m.on_send(1, 80, 10)
    assert m.total_elements() == 10
    assert m.total_elements(skip_ops=()) == 110
