"""Inference drivers: an in-process threaded simulation and TCP runners.

Determinism contract: every random draw in a run is derived from one user
seed through fixed purpose lanes, so a simulated run and a TCP run with the
same seed produce identical shares, identical masks, identical decoded
output and identical element counts. Purpose lanes: 1 weights, 2 input
values, 3 input shares, 4 source masks, 5 per-party protocol randomness
(joined by the rank).
"""

from dataclasses import dataclass, field as dc_field
import threading

import numpy as np

from .layers import comm_estimate, plan_schedule, sss_linear, sss_nonlinear, sss_truncation
from .metrics import CommMetrics
from .model import ModelGraph, share_tensor_signed
from .protocol import (AuditLog, MaskBundle, PartyContext, output_collect,
                       trusted_source_prepare)
from .transport import SimHub, TcpTransport
from .wire import Phase

PURPOSE_WEIGHTS = 1
PURPOSE_INPUT = 2
PURPOSE_INPUT_SHARES = 3
PURPOSE_MASKS = 4
PURPOSE_PARTY = 5


def seeded_rng(seed, *path):
    return np.random.default_rng([int(seed)] + [int(x) for x in path])


def _decoded_int64(out):
    # decode_signed hands back a plain int for 0-d inputs
    return np.asarray(np.asarray(out, dtype=object).tolist(), dtype=np.int64)


def deal_weight_shares(weight_values, scheme, seed):
    """Share every named weight tensor. Returns {rank: {name: ShareTensor}}.
    Names are dealt in sorted order so any runner agrees on the stream."""
    rng = seeded_rng(seed, PURPOSE_WEIGHTS)
    per_rank = {rank: {} for rank in range(1, scheme.n + 1)}
    for name in sorted(weight_values):
        shares = share_tensor_signed(weight_values[name], scheme, rng)
        for rank, st in enumerate(shares, start=1):
            per_rank[rank][name] = st
    return per_rank


def deal_input_shares(input_int, scheme, seed, index=0):
    rng = seeded_rng(seed, PURPOSE_INPUT_SHARES, index)
    return share_tensor_signed(np.asarray(input_int, dtype=object), scheme, rng)


def receive_bundle(ctx):
    payload = ctx.transport.recv(0, Phase.MASK_DIST)
    if ctx.audit is not None:
        ctx.audit.share_received("offline.bundle", src=0, masked=True)
    ctx.bundle = MaskBundle.decode(payload, ctx.scheme)


def send_bundles(transport, ops, scheme, seed, metrics=None):
    """Source side of the offline phase: draw all masks and ship one frame
    per party."""
    if metrics is not None:
        metrics.set_op(0, "offline", -1)
    rng = seeded_rng(seed, PURPOSE_MASKS)
    bundles, _ = trusted_source_prepare(ops, scheme, rng)
    for rank in range(1, scheme.n + 1):
        bundle = bundles[rank]
        transport.send(rank, Phase.MASK_DIST, bundle.encode(),
                       elements=bundle.element_count())


def run_party_online(ctx, ops, weight_shares, x_share, metrics=None):
    """Walk the schedule on one rank. Returns the decoded signed output at
    the elite, None elsewhere."""
    x = x_share
    for idx, op in enumerate(ops):
        if metrics is not None:
            metrics.set_op(ctx.rank, op.name, op.layer)
        tag = f"op{idx}.{op.name}"
        if op.kind == "linear":
            w = weight_shares[op.weight + ".w"]
            b = weight_shares[op.weight + ".b"]
            zero = ctx.bundle.take(idx, "zero")
            x = sss_linear(ctx, op, x, w, b, zero, tag=tag)
        elif op.kind == "truncation":
            alpha = ctx.bundle.take(idx, "alpha")
            comp = ctx.bundle.take(idx, "comp")
            x = sss_truncation(ctx, op, x, alpha, comp, tag=tag)
        elif op.kind == "nonlinear":
            beta = ctx.bundle.take(idx, "beta")
            beta_inv = ctx.bundle.take(idx, "beta_inv")
            x = sss_nonlinear(ctx, op, x, beta, beta_inv, tag=tag)
        elif op.kind == "output":
            return output_collect(ctx, x, tag="output")
        else:
            raise ValueError(f"unknown op kind {op.kind!r}")
    return None


@dataclass
class SimResult:
    output: np.ndarray
    metrics: CommMetrics
    hub: SimHub
    ops: list
    schedule_digest: bytes
    audit_logs: list = dc_field(default_factory=list)

    def transcript_digest(self):
        return self.hub.transcript_digest()


def _run_threads(workers, timeout=120.0):
    """Start callables as threads, join with a deadline, re-raise the first
    worker error."""
    errors = {}

    def wrap(name, fn):
        def run():
            try:
                fn()
            except BaseException as exc:   # propagated after join
                errors[name] = exc
        t = threading.Thread(target=run, name=name, daemon=True)
        return t

    threads = [wrap(name, fn) for name, fn in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    stuck = [t.name for t in threads if t.is_alive()]
    if errors:
        name = sorted(errors)[0]
        raise errors[name]
    if stuck:
        raise RuntimeError(f"run stalled; threads still waiting: {stuck}")


def simulate_schedule(ops, schedule_digest, scheme, seed, input_int=None,
                      weight_values=None, audit=False, metrics=None,
                      input_index=0, timeout=120.0, preshared=None,
                      input_shares=None):
    """Run one inference over the in-process hub. weight_values maps weight
    names to plain int64 tensors (only needed when the schedule has linear
    ops); everything else is derived from the seed. preshared and
    input_shares inject already-dealt material (e.g. loaded from share
    files) in place of in-process dealing."""
    metrics = metrics if metrics is not None else CommMetrics()
    hub = SimHub(range(0, scheme.n + 1), metrics)
    per_rank = (preshared if preshared is not None
                else deal_weight_shares(weight_values or {}, scheme, seed))
    if input_shares is None:
        if input_int is None:
            raise ValueError("need input_int or input_shares")
        input_shares = deal_input_shares(input_int, scheme, seed, input_index)

    outputs = {}
    logs = {}

    def party(rank):
        def run():
            ctx = PartyContext(
                scheme, rank, hub.transport(rank),
                rng=seeded_rng(seed, PURPOSE_PARTY, rank),
                audit=AuditLog(rank) if audit else None)
            metrics.set_op(rank, "offline", -1)
            receive_bundle(ctx)
            out = run_party_online(ctx, ops, per_rank[rank],
                                   input_shares[rank - 1], metrics)
            if out is not None:
                outputs[rank] = out
            if ctx.audit is not None:
                logs[rank] = ctx.audit
        return run

    def source():
        send_bundles(hub.transport(0), ops, scheme, seed, metrics)

    workers = [("source", source)]
    workers += [(f"party{r}", party(r)) for r in range(1, scheme.n + 1)]
    _run_threads(workers, timeout=timeout)

    out = outputs.get(1)
    if out is not None:
        out = _decoded_int64(out)
    return SimResult(out, metrics, hub, list(ops), schedule_digest,
                     [logs[r] for r in sorted(logs)])


def simulate_inference(model: ModelGraph, scheme, seed, input_int,
                       ordering="ltn", audit=False, metrics=None,
                       input_index=0):
    """Plan and simulate one secure inference of a full model."""
    ops, digest = plan_schedule(model, scheme, ordering)
    weight_values = {name: qt.values for name, qt in model.weights.items()}
    return simulate_schedule(ops, digest, scheme, seed, input_int,
                             weight_values, audit=audit, metrics=metrics,
                             input_index=input_index)


def estimate_report(model, scheme, ordering="ltn"):
    ops, _ = plan_schedule(model, scheme, ordering)
    return comm_estimate(ops, scheme)


# -- TCP runners (same protocol code over real sockets) --


def run_tcp_party(rank, peers, ops, schedule_digest, scheme, model_digest,
                  seed, weight_shares, x_share, audit=False, metrics=None,
                  timeout=30.0):
    """One party over TCP. Blocks until the run completes; returns the
    decoded output at the elite, None elsewhere."""
    transport = TcpTransport.establish(
        rank, peers, scheme.k, scheme.n, model_digest, schedule_digest,
        metrics=metrics, expect_source=True, timeout=timeout)
    try:
        ctx = PartyContext(scheme, rank, transport,
                           rng=seeded_rng(seed, PURPOSE_PARTY, rank),
                           audit=AuditLog(rank) if audit else None)
        if metrics is not None:
            metrics.set_op(rank, "offline", -1)
        receive_bundle(ctx)
        out = run_party_online(ctx, ops, weight_shares, x_share, metrics)
        if out is not None:
            out = _decoded_int64(out)
        return out, ctx.audit
    finally:
        transport.close()


def run_tcp_source(peers, ops, schedule_digest, scheme, model_digest, seed,
                   metrics=None, timeout=30.0):
    transport = TcpTransport.establish(
        0, peers, scheme.k, scheme.n, model_digest, schedule_digest,
        metrics=metrics, expect_source=False, timeout=timeout)
    try:
        send_bundles(transport, ops, scheme, seed, metrics)
    finally:
        transport.close()
