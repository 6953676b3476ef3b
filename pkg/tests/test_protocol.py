import threading

import numpy as np
import pytest

from ssnet.field import PrimeField
from ssnet.layers import ScheduledOp
from ssnet.metrics import CommMetrics
from ssnet.protocol import (
    AuditLog,
    MaskBundle,
    PartyContext,
    audit_violations,
    distributed_zero_shares,
    naive_degree_reduce,
    output_collect,
    rerand,
    reshare_degree_reduce,
    trusted_source_prepare,
)
from ssnet.sss import DegreeMismatch, ShareTensor, SssScheme, share_mul
from ssnet.transport import SimHub

F11 = PrimeField(11)
F = PrimeField()


def _run(scheme, fn, seed=0, audit=False, metrics=None):
    """Run fn(ctx) on every rank over the simulated mesh."""
    hub = SimHub(range(1, scheme.n + 1), metrics=metrics)
    results, errors, audits = {}, {}, []
    threads = []
    for rank in range(1, scheme.n + 1):
        log = AuditLog(rank) if audit else None
        if log is not None:
            audits.append(log)
        ctx = PartyContext(scheme, rank, hub.transport(rank),
                           rng=np.random.default_rng([seed, rank]), audit=log)

        def worker(ctx=ctx):
            try:
                results[ctx.rank] = fn(ctx)
            except Exception as exc:  # noqa: BLE001 - re-raised below
                errors[ctx.rank] = exc

        threads.append(threading.Thread(target=worker))
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    if errors:
        raise errors[sorted(errors)[0]]
    return results, audits


def _product_shares(scheme, values):
    return {rank: ShareTensor(scheme.party_ids[rank - 1],
                              2 * (scheme.k - 1),
                              np.array(values[rank - 1], dtype=object), scheme)
            for rank in range(1, scheme.n + 1)}


def test_reshare_golden_values():
    # product shares (2, 6, 7) lie on 6+3x+4x^2; the reducing matrix sends
    # them to (9, 1, 4) regardless of the sub-share randomness
    s = SssScheme(F11, 2, 3)
    pre = _product_shares(s, (2, 6, 7))
    results, _ = _run(s, lambda ctx: reshare_degree_reduce(
        ctx, pre[ctx.rank], passive_out=True), seed=5)
    assert [int(results[r].values) for r in (1, 2, 3)] == [9, 1, 4]
    assert all(st.degree == 1 for st in results.values())
    assert int(s.rec([results[1], results[2]])) == 6


def test_reshare_without_passive_output():
    s = SssScheme(F11, 2, 3)
    pre = _product_shares(s, (2, 6, 7))
    results, _ = _run(s, lambda ctx: reshare_degree_reduce(
        ctx, pre[ctx.rank], passive_out=False), seed=6)
    assert int(results[1].values) == 9
    assert int(results[2].values) == 1
    assert results[3] is None
    assert int(s.rec([results[1], results[2]])) == 6


def test_reshare_element_counts_and_rounds():
    # per tensor element: 6 no-passive / 8 passive at k=2, 18/24 at k=3
    cases = [((2, 3), False, 6), ((2, 3), True, 8),
             ((3, 5), False, 18), ((3, 5), True, 24)]
    for (k, n), passive, per_elem in cases:
        s = SssScheme(F, k, n)
        rng = np.random.default_rng(17)
        a = s.gen(F.rand(rng, (5,)), rng)
        b = s.gen(F.rand(rng, (5,)), rng)
        prod = {r: share_mul(a[r - 1], b[r - 1]) for r in range(1, n + 1)}
        metrics = CommMetrics()

        def fn(ctx, prod=prod, passive=passive, metrics=metrics):
            metrics.set_op(ctx.rank, "red", 0)
            return reshare_degree_reduce(ctx, prod[ctx.rank],
                                         passive_out=passive)

        _run(s, fn, seed=k, metrics=metrics)
        assert metrics.elements_sent("red", 0) == per_elem * 5
        assert metrics.rounds("red", 0) == 2


def test_reshare_reconstructs_products():
    for k, n in [(2, 3), (3, 5), (4, 7)]:
        s = SssScheme(F, k, n)
        rng = np.random.default_rng(100 * k + n)
        for _ in range(3):
            x = F.rand(rng, (4,))
            y = F.rand(rng, (4,))
            xs = s.gen(x, rng)
            ys = s.gen(y, rng)
            prod = {r: share_mul(xs[r - 1], ys[r - 1])
                    for r in range(1, n + 1)}
            results, _ = _run(s, lambda ctx, prod=prod: reshare_degree_reduce(
                ctx, prod[ctx.rank], passive_out=True), seed=n)
            assert all(st.degree == k - 1 for st in results.values())
            got = s.rec([results[r] for r in range(1, k + 1)])
            assert np.all(got == (x * y) % F.p)


def test_reshare_rejects_wrong_degree():
    s = SssScheme(F11, 2, 3)
    rng = np.random.default_rng(0)
    plain = {r: st for r, st in enumerate(s.gen(3, rng), start=1)}
    with pytest.raises(DegreeMismatch):
        _run(s, lambda ctx: reshare_degree_reduce(ctx, plain[ctx.rank]))


def test_rerand_golden_and_identity():
    s = SssScheme(F11, 2, 3)
    x = {r: ShareTensor(r, 1, np.array(v, dtype=object), s)
         for r, v in zip((1, 2, 3), (9, 1, 4))}
    zeros = s.gen(0, coeffs=[4])  # polynomial 0 + 4x -> shares (4, 8, 1)
    assert [int(z.values) for z in zeros] == [4, 8, 1]
    post = {r: rerand(x[r], zeros[r - 1]) for r in (1, 2, 3)}
    assert [int(post[r].values) for r in (1, 2, 3)] == [2, 9, 5]
    assert int(s.rec([post[1], post[2]])) == 6

    rng = np.random.default_rng(21)
    v = F11.rand(rng, (6,))
    shares = s.gen(v, rng)
    fresh = s.gen(np.zeros(6, dtype=object), rng)
    mixed = [rerand(a, z) for a, z in zip(shares, fresh)]
    assert np.all(s.rec(mixed[:2]) == v)
    assert any(np.any(m.values != a.values) for m, a in zip(mixed, shares))


def test_rerand_degree_mismatch():
    s = SssScheme(F11, 2, 3)
    x = ShareTensor(1, 2, np.array(5, dtype=object), s)
    z = s.gen(0, rng=np.random.default_rng(3))[0]
    with pytest.raises(DegreeMismatch):
        rerand(x, z)


def test_naive_reduction_leaks_secret():
    s = SssScheme(F11, 2, 3)
    rng = np.random.default_rng(9)
    xs = s.gen(2, rng)
    ys = s.gen(3, rng)
    prod = {r: share_mul(xs[r - 1], ys[r - 1]) for r in (1, 2, 3)}

    results, audits = _run(s, lambda ctx: naive_degree_reduce(
        ctx, prod[ctx.rank]), seed=4, audit=True)
    reduced_1, leak = results[1]
    # the value itself comes out right...
    assert int(s.rec([reduced_1, results[2][0]])) == 6
    # ...but the elite walked away with the plaintext secret
    assert int(leak["secret"]) == 6
    assert len(leak["foreign_shares"]) == 2
    problems = audit_violations(audits, s.k)
    assert any("rank 1" in p and "raw shares" in p for p in problems)
    assert any("unmasked reconstruction" in p for p in problems)


def test_honest_reshare_passes_audit():
    s = SssScheme(F11, 2, 3)
    pre = _product_shares(s, (2, 6, 7))
    _, audits = _run(s, lambda ctx: reshare_degree_reduce(
        ctx, pre[ctx.rank], passive_out=True), seed=5, audit=True)
    assert audit_violations(audits, s.k) == []


def test_distributed_zero_shares():
    s = SssScheme(F, 2, 3)
    metrics = CommMetrics()
    results, _ = _run(s, lambda ctx: distributed_zero_shares(
        ctx, (4,), metrics=metrics), seed=13, metrics=metrics)
    assert all(st.degree == 1 for st in results.values())
    assert np.all(s.rec([results[1], results[2]]) == 0)
    # n*(n-1) elements per tensor element, n-1 sends per party
    assert metrics.elements_sent("zero_dist") == 3 * 2 * 4
    per_party = [r["elements_sent"] for r in metrics.records()
                 if r["op"] == "zero_dist"]
    assert per_party == [8, 8, 8]


def test_distributed_zero_single_party():
    s = SssScheme(F11, 1, 1)
    ctx = PartyContext(s, 1, None, rng=np.random.default_rng(2))
    st = distributed_zero_shares(ctx, (3,))
    assert st.degree == 0
    assert np.all(s.rec([st], m=1) == 0)


def test_output_collect_decodes_signed():
    s = SssScheme(F, 2, 3)
    rng = np.random.default_rng(31)
    secret = np.array([-5, 0, 7], dtype=object)
    shares = s.gen(F.encode_signed(secret), rng)
    results, audits = _run(s, lambda ctx: output_collect(
        ctx, shares[ctx.rank - 1]), audit=True)
    assert np.all(np.asarray(results[1], dtype=object) == secret)
    assert results[2] is None and results[3] is None
    # the final disclosure is whitelisted
    assert audit_violations(audits, s.k) == []


def test_mask_bundle_roundtrip():
    s = SssScheme(F, 2, 3)
    rng = np.random.default_rng(8)
    b = MaskBundle()
    b.put(0, "zero", s.gen(np.zeros((2, 2), dtype=object), rng)[0])
    b.put(1, "alpha", s.gen(F.rand(rng, (3,)), rng)[1])
    b.put(2, "beta", s.gen(7, rng)[2])  # 0-d entry
    assert b.element_count() == 4 + 3 + 1
    back = MaskBundle.decode(b.encode(), s)
    assert sorted(back.entries) == sorted(b.entries)
    for key, st in b.entries.items():
        got = back.entries[key]
        assert (got.party_id, got.degree) == (st.party_id, st.degree)
        assert got.values.shape == st.values.shape
        assert np.all(np.asarray(got.values, dtype=object) == st.values)
    taken = back.take(1, "alpha")
    assert taken.values.shape == (3,)
    assert (1, "alpha") not in back.entries


def test_trusted_source_mask_algebra():
    s = SssScheme(F, 2, 3)
    rng = np.random.default_rng(77)
    ops = [
        ScheduledOp(kind="linear", layer=0, name="conv", in_shape=(3,),
                    out_shape=(2, 2)),
        ScheduledOp(kind="truncation", layer=0, name="div", in_shape=(5,),
                    out_shape=(5,), r=8, divisor=4, value_bound=50),
        ScheduledOp(kind="nonlinear", layer=0, name="act", in_shape=(1, 4, 4),
                    out_shape=(1, 2, 2), relu=True, pool=(2, 2),
                    pool_kind="max", value_bound=30),
        ScheduledOp(kind="output", layer=-1, name="output", in_shape=(2,),
                    out_shape=(2,)),
    ]
    bundles, plain = trusted_source_prepare(ops, s, rng, record_plain=True)
    assert sorted(bundles) == [1, 2, 3]
    assert bundles[1].element_count() == 4 + (5 + 5) + (16 + 4)

    def rec(idx, name):
        return s.rec([bundles[r].entries[(idx, name)] for r in (1, 2)])

    zero = rec(0, "zero")
    assert zero.shape == (2, 2) and np.all(zero == 0)

    step = 8 * 4
    alpha = rec(1, "alpha")
    comp = rec(1, "comp")
    e = plain[1]["e"]
    assert np.all(alpha == (e * step) % F.p)
    assert np.all(alpha % step == 0)
    assert np.all(F.decode_signed(comp) == -e)
    assert np.all((alpha + step * comp) % F.p == 0)
    assert np.all(e >= 1)

    beta = rec(2, "beta")
    beta_inv = rec(2, "beta_inv")
    assert np.all(beta == plain[2]["beta"])
    assert np.all(beta >= 1) and np.all(beta <= 1 << 28)
    # block-constant over each 2x2 window, one inverse per window
    assert beta_inv.shape == (1, 2, 2)
    for i in range(2):
        for j in range(2):
            window = beta[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            assert len({int(v) for v in window.ravel()}) == 1
            assert (int(window[0, 0]) * int(beta_inv[0, i, j])) % F.p == 1


def test_additive_mask_respects_field_window():
    from ssnet.masks import additive_mask_bound

    assert additive_mask_bound(F, 1 << 16, 0) == 1 << 16
    assert additive_mask_bound(F, (1 << 16) * 4, 0) == 1 << 14
    # tight window: p=11, step 2, bound 3 -> values span [-3,3], emax=3
    assert additive_mask_bound(F11, 2, 3) == 3
    assert additive_mask_bound(F11, 2, 5) == 1  # window exactly fills p
    with pytest.raises(ValueError):
        additive_mask_bound(F11, 2, 6)


def test_audit_scanner_rules():
    log = AuditLog(2)
    log.share_received("red.out", 1, masked=False, own=True)
    log.share_received("red.out", 3, masked=False, own=True)
    log.reconstructed("output", masked=False)
    log.reconstructed("trunc.masked", masked=True)
    assert audit_violations([log], 2) == []

    bad = AuditLog(1)
    bad.share_received("w", 2, masked=False)
    assert audit_violations([bad], 2) == []  # k-1 foreign shares is fine
    bad.share_received("w", 3, masked=False)
    assert len(audit_violations([bad], 2)) == 1

    peek = AuditLog(1)
    peek.reconstructed("layer0", masked=False)
    assert len(audit_violations([peek], 2)) == 1
