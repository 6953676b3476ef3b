import socket
import threading
import time

import numpy as np
import pytest

from ssnet.engine import (
    PURPOSE_INPUT_SHARES,
    PURPOSE_MASKS,
    PURPOSE_WEIGHTS,
    _run_threads,
    deal_input_shares,
    deal_weight_shares,
    estimate_report,
    run_tcp_party,
    run_tcp_source,
    seeded_rng,
    simulate_inference,
    simulate_schedule,
)
from ssnet.field import PrimeField
from ssnet.layers import plan_schedule
from ssnet.metrics import CommMetrics
from ssnet.model import (
    Dense,
    ModelGraph,
    NonLinear,
    QuantizedTensor,
    Truncation,
    build_reference_model,
    plaintext_infer,
    random_input,
)
from ssnet.protocol import audit_violations
from ssnet.sss import SssScheme

F = PrimeField()
S23 = SssScheme(F, 2, 3)


def test_simulated_inference_matches_plaintext():
    model, _ = build_reference_model(7, pool="max")
    for scheme in (S23, SssScheme(F, 3, 5)):
        x, _ = random_input(42, model, index=scheme.n)
        result = simulate_inference(model, scheme, seed=9, input_int=x)
        assert np.all(result.output == plaintext_infer(model, x))


def test_avg_pool_model_matches_merged_oracle():
    model, _ = build_reference_model(7, pool="avg")
    x, _ = random_input(43, model)
    result = simulate_inference(model, S23, seed=10, input_int=x)
    assert np.all(result.output == plaintext_infer(model, x, mode="merged"))


def test_lnt_ordering_same_answer():
    model, _ = build_reference_model(7, pool="max")
    x, _ = random_input(44, model)
    ltn = simulate_inference(model, S23, seed=11, input_int=x)
    lnt = simulate_inference(model, S23, seed=11, input_int=x, ordering="lnt")
    assert np.all(ltn.output == lnt.output)
    assert np.all(ltn.output == plaintext_infer(model, x))


def test_transcript_determinism():
    model, _ = build_reference_model(7, pool="max")
    x, _ = random_input(45, model)
    a = simulate_inference(model, S23, seed=12, input_int=x)
    b = simulate_inference(model, S23, seed=12, input_int=x)
    c = simulate_inference(model, S23, seed=13, input_int=x)
    assert a.transcript_digest() == b.transcript_digest()
    assert a.transcript_digest() != c.transcript_digest()
    assert np.all(a.output == c.output)  # fresh masks, same answer


def test_measured_communication_equals_estimate():
    model, _ = build_reference_model(7, pool="max")
    for ordering in ("ltn", "lnt"):
        x, _ = random_input(46, model)
        result = simulate_inference(model, S23, seed=14, input_int=x,
                                    ordering=ordering)
        rows = estimate_report(model, S23, ordering=ordering)
        for row, op in zip(rows, result.ops):
            assert result.metrics.elements_sent(op.name, op.layer) \
                == row["elements"]
            assert result.metrics.rounds(op.name, op.layer) == row["rounds"]
        offline = rows[-1]
        assert offline["kind"] == "offline"
        assert result.metrics.elements_sent("offline", -1) == offline["elements"]
        assert result.metrics.rounds("offline", -1) == 1


def test_audit_mode_reports_clean_run():
    model, _ = build_reference_model(7, pool="max")
    x, _ = random_input(47, model)
    result = simulate_inference(model, S23, seed=15, input_int=x, audit=True)
    assert len(result.audit_logs) == 3
    assert audit_violations(result.audit_logs, S23.k) == []


def test_purpose_lanes_are_independent():
    a = seeded_rng(7, PURPOSE_WEIGHTS).integers(0, 1 << 40, size=8)
    b = seeded_rng(7, PURPOSE_MASKS).integers(0, 1 << 40, size=8)
    assert np.any(a != b)

    x = np.arange(-5, 5)
    s0 = deal_input_shares(x, S23, seed=7, index=0)
    s0_again = deal_input_shares(x, S23, seed=7, index=0)
    s1 = deal_input_shares(x, S23, seed=7, index=1)
    assert np.all(s0[0].values == s0_again[0].values)
    assert np.any(s0[0].values != s1[0].values)
    assert np.all(F.decode_signed(S23.rec(s0[:2])) == x.astype(object))

    w = {"d.w": np.arange(6).reshape(2, 3), "d.b": np.array([1, -1])}
    d1 = deal_weight_shares(w, S23, seed=7)
    d2 = deal_weight_shares(w, S23, seed=7)
    assert np.all(d1[2]["d.w"].values == d2[2]["d.w"].values)


def test_preshared_material_reproduces_inline_run():
    model, _ = build_reference_model(7, pool="max")
    x, _ = random_input(48, model)
    ops, digest = plan_schedule(model, S23)
    weights = {name: qt.values for name, qt in model.weights.items()}
    inline = simulate_inference(model, S23, seed=16, input_int=x)
    injected = simulate_schedule(
        ops, digest, S23, seed=16,
        preshared=deal_weight_shares(weights, S23, 16),
        input_shares=deal_input_shares(x, S23, 16, 0))
    assert np.all(inline.output == injected.output)
    assert inline.transcript_digest() == injected.transcript_digest()


def test_run_threads_propagates_errors():
    def boom():
        raise ValueError("boom")

    with pytest.raises(ValueError, match="boom"):
        _run_threads([("w", boom)], timeout=5)

    def hang():
        time.sleep(2)

    with pytest.raises(RuntimeError, match="stalled"):
        _run_threads([("sleeper", hang)], timeout=0.2)


def _tiny_model():
    rng = np.random.default_rng(3)
    weights = {
        "d1.w": QuantizedTensor(rng.integers(-2000, 2000, size=(4, 6)), 12),
        "d1.b": QuantizedTensor(rng.integers(-500, 500, size=4), 19, bits=32),
        "d2.w": QuantizedTensor(rng.integers(-2000, 2000, size=(2, 4)), 12),
        "d2.b": QuantizedTensor(rng.integers(-500, 500, size=2), 19, bits=32),
    }
    layers = [Dense("d1", 4), Truncation(12), NonLinear(relu=True),
              Dense("d2", 2), Truncation(12)]
    return ModelGraph("tiny", (6,), layers, weights)


def _free_ports(count):
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def test_tcp_run_matches_simulation():
    model = _tiny_model()
    x = np.array([30, -80, 12, 0, 77, -5])
    seed = 21
    ops, digest = plan_schedule(model, S23)
    weights = {name: qt.values for name, qt in model.weights.items()}
    sim = simulate_schedule(ops, digest, S23, seed, input_int=x,
                            weight_values=weights)
    assert np.all(sim.output == plaintext_infer(model, x))

    per_rank = deal_weight_shares(weights, S23, seed)
    input_shares = deal_input_shares(x, S23, seed, 0)
    peers = [("127.0.0.1", p) for p in _free_ports(3)]
    model_digest = model.digest()
    tcp_metrics = CommMetrics()
    outputs = {}

    def party(rank):
        def run():
            out, _ = run_tcp_party(
                rank, peers, ops, digest, S23, model_digest, seed,
                per_rank[rank], input_shares[rank - 1],
                metrics=tcp_metrics, timeout=15)
            if out is not None:
                outputs[rank] = out
        return run

    workers = [("source", lambda: run_tcp_source(
        peers, ops, digest, S23, model_digest, seed,
        metrics=tcp_metrics, timeout=15))]
    workers += [(f"party{r}", party(r)) for r in (1, 2, 3)]
    _run_threads(workers, timeout=60)

    assert np.all(outputs[1] == sim.output)
    # same protocol, same accounting: per-op elements and rounds agree
    assert tcp_metrics.summary() == sim.metrics.summary()
