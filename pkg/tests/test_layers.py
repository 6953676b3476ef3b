import threading

import numpy as np
import pytest

from ssnet.field import PrimeField
from ssnet.layers import (
    ScheduledOp,
    _window_decode,
    comm_estimate,
    full_layer_formula,
    plan_schedule,
    sss_linear,
    sss_nonlinear,
    sss_truncation,
    zero_reshaped,
)
from ssnet.masks import gen_additive_mask, gen_multiplicative_mask, gen_zero_shares
from ssnet.model import build_reference_model, im2col, round_half_away
from ssnet.protocol import PartyContext
from ssnet.sss import ShareTensor, SssScheme
from ssnet.transport import SimHub

F11 = PrimeField(11)
F = PrimeField()
S23 = SssScheme(F, 2, 3)


def _run(scheme, fn, seed=0):
    hub = SimHub(range(1, scheme.n + 1))
    results, errors = {}, {}
    threads = []
    for rank in range(1, scheme.n + 1):
        ctx = PartyContext(scheme, rank, hub.transport(rank),
                           rng=np.random.default_rng([seed, rank]))

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
    return results


def _rec_signed(scheme, results):
    pts = [results[r] for r in range(1, scheme.k + 1)]
    return scheme.field.decode_signed(scheme.rec(pts))


def test_plan_schedule_reference_ltn():
    model, _ = build_reference_model(7, pool="max")
    ops, digest = plan_schedule(model, S23)
    assert [op.kind for op in ops] == [
        "linear", "truncation", "nonlinear",
        "linear", "truncation", "nonlinear",
        "linear", "truncation", "nonlinear",
        "linear", "truncation", "output"]
    assert [op.name for op in ops[:4]] == ["conv1", "div1", "nl2", "conv2"]
    assert ops[0].in_shape == (1, 12, 12) and ops[0].out_shape == (4, 10, 10)
    assert ops[2].pool == (2, 2) and ops[2].pool_kind == "max"
    assert ops[2].out_shape == (4, 5, 5)
    assert ops[-1].layer == -1 and ops[-1].out_shape == (10,)
    # a linear feeds a truncation (front ranks only); a nonlinear feeds the
    # next linear (everyone)
    assert [op.passive_out for op in ops if op.kind == "linear"] == [False] * 4
    assert [op.passive_out for op in ops if op.kind == "nonlinear"] == [True] * 3
    assert ops[1].r == 1 << 12 and ops[1].divisor == 1
    assert ops[1].value_bound == model.accumulator_bound(0)
    assert len(digest) == 32


def test_plan_schedule_avg_merges_divisor():
    model, _ = build_reference_model(7, pool="avg")
    ops, _ = plan_schedule(model, S23)
    assert ops[1].kind == "truncation" and ops[1].divisor == 4
    assert ops[2].kind == "nonlinear" and ops[2].pool_kind == "sum"
    act_bound = (1 << 15) + 8
    assert ops[2].value_bound == act_bound * 4


def test_plan_schedule_lnt_swaps_pairs():
    model, _ = build_reference_model(7, pool="max")
    ltn, _ = plan_schedule(model, S23, ordering="ltn")
    lnt, _ = plan_schedule(model, S23, ordering="lnt")
    assert [op.kind for op in lnt[:4]] == [
        "linear", "nonlinear", "truncation", "linear"]
    # the swapped nonlinear pools at accumulator width, and the divide step
    # then runs on the pooled shape
    assert lnt[1].in_shape == (4, 10, 10) and lnt[1].out_shape == (4, 5, 5)
    assert lnt[1].value_bound == ltn[1].value_bound
    assert lnt[2].in_shape == (4, 5, 5) and lnt[2].out_shape == (4, 5, 5)
    # flags follow the new successors: nonlinear now feeds a truncation
    assert [op.passive_out for op in lnt if op.kind == "nonlinear"] == [False] * 3
    avg, _ = build_reference_model(7, pool="avg")
    with pytest.raises(ValueError, match="lnt"):
        plan_schedule(avg, S23, ordering="lnt")
    with pytest.raises(ValueError, match="ordering"):
        plan_schedule(model, S23, ordering="tln")


def test_schedule_digest_sensitivity():
    model, _ = build_reference_model(7, pool="max")
    avg, _ = build_reference_model(7, pool="avg")
    base = plan_schedule(model, S23)[1]
    assert plan_schedule(model, S23)[1] == base
    assert plan_schedule(model, SssScheme(F, 3, 5))[1] != base
    assert plan_schedule(model, S23, ordering="lnt")[1] != base
    assert plan_schedule(avg, S23)[1] != base


def test_full_layer_formula_values():
    assert full_layer_formula(2) == 16
    assert full_layer_formula(3) == 35
    assert full_layer_formula(3) / full_layer_formula(2) == 2.1875


def test_comm_estimate_closed_forms():
    def one(kind, scheme, passive, **kw):
        op = ScheduledOp(kind, 0, kind, kw.pop("in_shape", (1,)),
                         kw.pop("out_shape", (1,)), passive_out=passive, **kw)
        rows = comm_estimate([op], scheme)
        return rows[0]["elements"], rows[0]["rounds"], rows[1]["elements"]

    s35 = SssScheme(F, 3, 5)
    assert one("linear", S23, True)[:2] == (8, 2)
    assert one("linear", S23, False)[:2] == (6, 2)
    assert one("linear", s35, True)[:2] == (24, 2)
    assert one("linear", s35, False)[:2] == (18, 2)
    assert one("nonlinear", s35, False)[:2] == (6, 1)
    assert one("nonlinear", S23, True)[:2] == (4, 1)
    assert one("truncation", S23, False)[:2] == (3, 1)
    assert one("truncation", s35, False)[:2] == (6, 1)
    assert one("output", s35, False)[:2] == (2, 1)

    # offline material: zeros for linear, two tensors for truncation,
    # factor and inverse for nonlinear
    assert one("linear", S23, True, out_shape=(4,))[2] == 3 * 4
    assert one("truncation", S23, False, in_shape=(4,))[2] == 2 * 3 * 4
    assert one("nonlinear", S23, True, in_shape=(4,), out_shape=(2,))[2] == 3 * 6

    # element counts scale with the tensor size
    big = ScheduledOp("linear", 0, "c", (1,), (5, 2), passive_out=True)
    assert comm_estimate([big], S23)[0]["elements"] == 8 * 10

    s11 = SssScheme(F, 1, 1)
    assert one("linear", s11, False)[:2] == (0, 0)


def test_window_decode_frozen():
    # window [-3, 8) over F11: residues 8, 9, 10 wrap to negatives
    got = [_window_decode(v, -3, 11) for v in range(11)]
    assert got == [0, 1, 2, 3, 4, 5, 6, 7, -3, -2, -1]
    assert [_window_decode(v, 0, 11) for v in (0, 5, 10)] == [0, 5, 10]
    arr = _window_decode(np.array([8, 2], dtype=object), -3, 11)
    assert arr.tolist() == [-3, 2]


def test_zero_reshaped():
    rng = np.random.default_rng(1)
    zero = gen_zero_shares((3, 2, 2), S23, rng)[0]
    assert zero_reshaped(zero, (3, 2, 2), S23) is zero
    flat = zero_reshaped(zero, (3, 4), S23)
    assert flat.shape == (3, 4) and flat.degree == zero.degree


def _deal_signed(scheme, values, rng):
    enc = scheme.field.encode_signed(np.asarray(values, dtype=object))
    return scheme.gen(enc, rng)


def test_sss_linear_conv_matches_oracle():
    rng = np.random.default_rng(60)
    x = rng.integers(-40, 40, size=(2, 4, 4))
    w = rng.integers(-15, 15, size=(3, 2, 3, 3))
    b = rng.integers(-100, 100, size=3)
    op = ScheduledOp("linear", 0, "c", (2, 4, 4), (3, 2, 2),
                     passive_out=True, stride=2, padding=1, weight="c")
    want = (w.reshape(3, -1) @ im2col(x, 3, 3, 2, 1)
            + b[:, None]).reshape(3, 2, 2)

    xs = _deal_signed(S23, x, rng)
    ws = _deal_signed(S23, w, rng)
    bs = _deal_signed(S23, b, rng)
    zs = gen_zero_shares((3, 2, 2), S23, rng)
    results = _run(S23, lambda ctx: sss_linear(
        ctx, op, xs[ctx.rank - 1], ws[ctx.rank - 1], bs[ctx.rank - 1],
        zs[ctx.rank - 1]), seed=1)
    assert all(st.degree == 1 for st in results.values())
    assert np.all(_rec_signed(S23, results) == want.astype(object))


def test_sss_linear_dense_and_flags():
    rng = np.random.default_rng(61)
    x = rng.integers(-40, 40, size=(2, 3, 3))  # dense flattens a 3-d input
    w = rng.integers(-15, 15, size=(4, 18))
    b = rng.integers(-50, 50, size=4)
    op = ScheduledOp("linear", 0, "d", (2, 3, 3), (4,),
                     passive_out=False, weight="d")
    want = w @ x.ravel() + b

    xs = _deal_signed(S23, x, rng)
    ws = _deal_signed(S23, w, rng)
    bs = _deal_signed(S23, b, rng)
    zs = gen_zero_shares((4,), S23, rng)
    results = _run(S23, lambda ctx: sss_linear(
        ctx, op, xs[ctx.rank - 1], ws[ctx.rank - 1], bs[ctx.rank - 1],
        zs[ctx.rank - 1]), seed=2)
    assert results[3] is None  # no passive redistribution
    assert np.all(_rec_signed(S23, results) == want.astype(object))


def test_sss_truncation_floors_negatives():
    rng = np.random.default_rng(62)
    x = np.array([-17, -8, -1, 0, 23, 999])
    op = ScheduledOp("truncation", 0, "div", (6,), (6,), r=8, value_bound=1000)
    xs = _deal_signed(S23, x, rng)
    alpha, comp, _ = gen_additive_mask((6,), 8, 1, S23, rng, 1000)
    results = _run(S23, lambda ctx: sss_truncation(
        ctx, op, xs[ctx.rank - 1], alpha[ctx.rank - 1], comp[ctx.rank - 1]),
        seed=3)
    assert np.all(_rec_signed(S23, results) == x // 8)


def test_sss_truncation_merged_divisor_rounds():
    rng = np.random.default_rng(63)
    x = np.array([96, -90, 41, -3])
    op = ScheduledOp("truncation", 0, "div", (4,), (4,), r=4, divisor=4,
                     value_bound=200)
    want = round_half_away(x // 4, 4)
    xs = _deal_signed(S23, x, rng)
    alpha, comp, _ = gen_additive_mask((4,), 4, 4, S23, rng, 200)
    results = _run(S23, lambda ctx: sss_truncation(
        ctx, op, xs[ctx.rank - 1], alpha[ctx.rank - 1], comp[ctx.rank - 1]),
        seed=4)
    assert np.all(_rec_signed(S23, results) == want.astype(object))


def test_sss_truncation_f11_counterexample():
    # x=5 shared as (0, 6, 1): dividing the shares in place reconstructs 8,
    # the masked path still yields floor(5/2) = 2
    s = SssScheme(F11, 2, 3)
    shares = [ShareTensor(i + 1, 1, np.array(v, dtype=object), s)
              for i, v in enumerate((0, 6, 1))]
    naive = [ShareTensor(st.party_id, 1,
                         np.array(int(st.values) // 2, dtype=object), s)
             for st in shares]
    assert int(s.rec(naive[:2])) == 8

    rng = np.random.default_rng(7)
    op = ScheduledOp("truncation", 0, "div", (), (), r=2, value_bound=5)
    alpha, comp, e = gen_additive_mask((), 2, 1, s, rng, 5)
    assert int(e) == 1  # the F11 window leaves a single choice
    results = _run(s, lambda ctx: sss_truncation(
        ctx, op, shares[ctx.rank - 1], alpha[ctx.rank - 1],
        comp[ctx.rank - 1]), seed=5)
    assert int(_rec_signed(s, results)) == 2


def test_sss_nonlinear_relu():
    rng = np.random.default_rng(64)
    x = np.array([-3, 5])
    op = ScheduledOp("nonlinear", 0, "nl", (2,), (2,), passive_out=True,
                     relu=True, value_bound=100)
    xs = _deal_signed(S23, x, rng)
    beta, beta_inv, _ = gen_multiplicative_mask((2,), S23, rng,
                                                value_bound=100)
    results = _run(S23, lambda ctx: sss_nonlinear(
        ctx, op, xs[ctx.rank - 1], beta[ctx.rank - 1],
        beta_inv[ctx.rank - 1]), seed=6)
    assert np.all(_rec_signed(S23, results) == np.array([0, 5], dtype=object))


def test_sss_nonlinear_pools():
    rng = np.random.default_rng(65)
    cases = [("max", np.array([[3, 9], [-2, 5]]), 9),
             ("max", np.array([[-3, -7], [-1, -9]]), 0),
             ("sum", np.array([[1, 2], [3, -4]]), 6)]
    for kind, window, want in cases:
        x = window.reshape(1, 2, 2)
        op = ScheduledOp("nonlinear", 0, "nl", (1, 2, 2), (1, 1, 1),
                         passive_out=False, relu=True, pool=(2, 2),
                         pool_kind=kind, value_bound=100)
        xs = _deal_signed(S23, x, rng)
        beta, beta_inv, plain_beta = gen_multiplicative_mask(
            (1, 2, 2), S23, rng, pool=(2, 2), value_bound=100)
        assert len({int(v) for v in plain_beta.ravel()}) == 1
        results = _run(S23, lambda ctx: sss_nonlinear(
            ctx, op, xs[ctx.rank - 1], beta[ctx.rank - 1],
            beta_inv[ctx.rank - 1]), seed=7)
        assert results[3] is None
        out = _rec_signed(S23, results)
        assert out.shape == (1, 1, 1) and int(out.ravel()[0]) == want


def test_maxpool_argmax_invariant_under_positive_factor():
    # every 2x2 kernel over [-8, 8]^4: a positive window-constant factor
    # moves neither the max nor which element attains it
    grid = np.stack(np.meshgrid(*[np.arange(-8, 9)] * 4,
                                indexing="ij")).reshape(4, -1).T
    relu = np.maximum(grid, 0)
    rng = np.random.default_rng(30)
    beta = rng.integers(1, 1 << 28, size=(relu.shape[0], 1))
    masked = relu * beta
    assert np.all(masked.max(axis=1) == beta[:, 0] * relu.max(axis=1))
    assert np.all(np.argmax(masked, axis=1) == np.argmax(relu, axis=1))
