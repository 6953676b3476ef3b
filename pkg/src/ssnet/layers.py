"""Secure layer operations and the schedule that sequences them.

Each inference is compiled to a schedule of four op kinds:

  linear      local share multiplication (conv or dense), degree reduction
              via resharing, re-randomization, bias add
  truncation  masked exact floor division by the scale (times any average
              pool window merged into it), one reconstruction at the elite
  nonlinear   multiplicative masking, plaintext relu/max/sum at the elite,
              broadcast, inverse mask multiply
  output      active ranks hand the elite their shares of the result

Every op carries a passive_out flag copied from its successor's needs:
linear and nonlinear steps consume shares on every rank, a truncation's
input is only touched by the front ranks, and the final collection needs
the front ranks alone. The flag decides how widely results are
redistributed, which is what separates the two element-count columns of the
per-op cost table.

Orderings: "ltn" (the default) runs divide before the nonlinearity;
"lnt" swaps them, pooling at accumulator width so the divide step runs on
the pooled (smaller) tensor. The swap is exact for relu and max pooling
because floor division is monotonic; average pooling depends on the divide
step running first, so lnt rejects it.
"""

from dataclasses import dataclass
import hashlib
import json

import numpy as np

from .masks import gen_additive_mask, gen_multiplicative_mask, gen_zero_shares
from .model import ACTIVATION_BITS, im2col, pool_blocks, round_half_away
from .protocol import reshare_degree_reduce, rerand
from .sss import ShareTensor, share_add
from .wire import Phase, ProtocolError, encode_plain_tensor, decode_plain_tensor

__all__ = [
    "ScheduledOp", "plan_schedule", "comm_estimate", "full_layer_formula",
    "sss_linear", "sss_truncation", "sss_nonlinear",
    "gen_additive_mask", "gen_multiplicative_mask", "gen_zero_shares",
]


@dataclass(frozen=True)
class ScheduledOp:
    kind: str                # linear | truncation | nonlinear | output
    layer: int               # model layer index, -1 for the output op
    name: str
    in_shape: tuple
    out_shape: tuple
    passive_out: bool = False
    r: int = 1               # truncation: divide by r
    divisor: int = 1         # truncation: extra divisor from average pooling
    relu: bool = False       # nonlinear
    pool: tuple = None       # nonlinear: (kh, kw) window or None
    pool_kind: str = None    # nonlinear: "max" | "sum" | None
    stride: int = 1          # linear (conv)
    padding: int = 0         # linear (conv)
    value_bound: int = 0     # bound on |plaintext| entering this op
    weight: str = None       # linear: weight key prefix

    def meta(self):
        return {"kind": self.kind, "layer": self.layer, "name": self.name,
                "in_shape": list(self.in_shape),
                "out_shape": list(self.out_shape),
                "passive_out": self.passive_out, "r": self.r,
                "divisor": self.divisor, "relu": self.relu,
                "pool": list(self.pool) if self.pool else None,
                "pool_kind": self.pool_kind,
                "stride": self.stride, "padding": self.padding,
                "value_bound": self.value_bound, "weight": self.weight}

    def replace(self, **kw):
        base = {"kind": self.kind, "layer": self.layer, "name": self.name,
                "in_shape": self.in_shape, "out_shape": self.out_shape,
                "passive_out": self.passive_out, "r": self.r,
                "divisor": self.divisor, "relu": self.relu,
                "pool": self.pool, "pool_kind": self.pool_kind,
                "stride": self.stride, "padding": self.padding,
                "value_bound": self.value_bound, "weight": self.weight}
        base.update(kw)
        return ScheduledOp(**base)


def _count(shape):
    total = 1
    for d in shape:
        total *= d
    return total


def plan_schedule(model, scheme, ordering="ltn"):
    """Compile a model into scheduled ops. Returns (ops, digest) where the
    digest binds scheme, ordering and op list for the handshake."""
    if ordering not in ("ltn", "lnt"):
        raise ValueError(f"unknown ordering {ordering!r}")
    chain = model.shapes()
    divisors = model.pending_divisors()
    act_bound = (1 << (ACTIVATION_BITS - 1)) + 8

    ops = []
    for i, layer in enumerate(model.layers):
        in_shape, out_shape = chain[i], chain[i + 1]
        if layer.kind in ("conv", "dense"):
            stride = getattr(layer, "stride", 1)
            padding = getattr(layer, "padding", 0)
            ops.append(ScheduledOp(
                "linear", i, layer.name, in_shape, out_shape,
                stride=stride, padding=padding,
                value_bound=model.accumulator_bound(i), weight=layer.name))
        elif layer.kind == "truncation":
            prev = model.layers[i - 1] if i else None
            if prev is not None and prev.kind in ("conv", "dense"):
                bound = model.accumulator_bound(i - 1)
            else:
                bound = act_bound * layer.r
            ops.append(ScheduledOp(
                "truncation", i, f"div{i}", in_shape, out_shape,
                r=layer.r, divisor=divisors[i], value_bound=bound))
        else:
            pool = None
            pool_kind = None
            bound = act_bound
            if layer.pool == "max":
                pool, pool_kind = (layer.pool_kh, layer.pool_kw), "max"
            elif layer.pool == "avg":
                pool, pool_kind = (layer.pool_kh, layer.pool_kw), "sum"
                bound = act_bound * layer.pool_kh * layer.pool_kw
            ops.append(ScheduledOp(
                "nonlinear", i, f"nl{i}", in_shape, out_shape,
                relu=layer.relu, pool=pool, pool_kind=pool_kind,
                value_bound=bound))

    if ordering == "lnt":
        ops = _swap_to_lnt(ops, model)

    final = chain[-1]
    ops.append(ScheduledOp("output", -1, "output", final, final))

    # passive participation: an op redistributes widely only if its
    # successor consumes shares on every rank
    needs_all = {"linear": True, "nonlinear": True,
                 "truncation": False, "output": False}
    flagged = []
    for i, op in enumerate(ops):
        if op.kind in ("linear", "nonlinear"):
            nxt = ops[i + 1] if i + 1 < len(ops) else None
            flagged.append(op.replace(
                passive_out=needs_all[nxt.kind] if nxt else False))
        else:
            flagged.append(op)
    ops = flagged

    canon = {"k": scheme.k, "n": scheme.n, "p": scheme.field.p,
             "party_ids": list(scheme.party_ids), "ordering": ordering,
             "ops": [op.meta() for op in ops]}
    digest = hashlib.sha256(
        json.dumps(canon, sort_keys=True).encode()).digest()
    return ops, digest


def _swap_to_lnt(ops, model):
    """Reorder each divide/nonlinear pair so pooling happens first. The
    divide step then runs on the pooled tensor at accumulator width."""
    out = []
    i = 0
    while i < len(ops):
        a = ops[i]
        b = ops[i + 1] if i + 1 < len(ops) else None
        if (b is not None and a.kind == "truncation" and b.kind == "nonlinear"):
            if b.pool_kind == "sum":
                raise ValueError("average pooling is not supported under lnt")
            nl = b.replace(in_shape=a.in_shape,
                           out_shape=b.out_shape if b.pool else a.in_shape,
                           value_bound=a.value_bound)
            tr = a.replace(in_shape=nl.out_shape, out_shape=nl.out_shape)
            out.extend([nl, tr])
            i += 2
        else:
            out.append(a)
            i += 1
    return out


def full_layer_formula(k: int) -> int:
    """Closed-form elements per value for one full linear/divide/nonlinear
    block with passive redistribution."""
    return 3 * k * k + 4 * k - 4


def comm_estimate(ops, scheme):
    """Predicted online elements and rounds per op, plus the offline row
    (mask material the source deals, all ranks combined)."""
    k, n = scheme.k, scheme.n
    rows = []
    offline = 0
    for idx, op in enumerate(ops):
        n_in, n_out = _count(op.in_shape), _count(op.out_shape)
        if op.kind == "linear":
            if k == 1:
                elements, rounds = 0, 0
            else:
                redistribute = k * (n - 1) if op.passive_out else k * (k - 1)
                elements = (2 * k * (k - 1) + redistribute) * n_out
                rounds = 2
            offline += n * n_out
        elif op.kind == "truncation":
            elements = (k - 1) * n_in + (n - 1) * n_in
            rounds = 1
            offline += 2 * n * n_in
        elif op.kind == "nonlinear":
            fan_out = (n - 1) if op.passive_out else (k - 1)
            elements = (2 * k - 2) * n_in + fan_out * n_out
            rounds = 1
            offline += n * (n_in + n_out)
        else:
            elements = (k - 1) * n_out
            rounds = 1
        rows.append({"op": idx, "kind": op.kind, "layer": op.layer,
                     "name": op.name, "elements": elements, "rounds": rounds})
    rows.append({"op": -1, "kind": "offline", "layer": -1, "name": "offline",
                 "elements": offline, "rounds": 1})
    return rows


# -- secure ops --


def _window_decode(values, lo, p):
    """Map field values into the integer window [lo, lo + p)."""
    return ((values - lo) % p) + lo


def sss_linear(ctx, op, x, w_share, b_share, zero, tag=None):
    """Bilinear layer on shares: local multiply, reshare-based degree
    reduction, re-randomize, add bias. Returns the output share, or None on
    ranks the planner left out."""
    s = ctx.scheme
    f = s.field
    tag = tag or op.name
    prod = None
    if ctx.is_participant:
        if x is None:
            raise ProtocolError(f"rank {ctx.rank} missing input for {op.name}")
        w = w_share.values
        if w.ndim == 4:   # conv; dense weights are 2-d whatever the input
            kh, kw = w.shape[2], w.shape[3]
            cols = im2col(x.values.reshape(op.in_shape), kh, kw,
                          op.stride, op.padding)
            acc = (w.reshape(w.shape[0], -1) @ cols) % f.p
        else:
            acc = (w @ x.values.ravel()) % f.p
        prod = ShareTensor(ctx.party_id, x.degree + w_share.degree, acc, s)

    reduced = reshare_degree_reduce(ctx, prod, op.passive_out, tag=tag)
    if reduced is None:
        return None
    fresh = rerand(reduced, zero_reshaped(zero, reduced.shape, s))
    b = b_share.values
    if len(op.out_shape) == 3:
        vals = (fresh.values + b[:, None]) % f.p
    else:
        vals = (fresh.values + b) % f.p
    return ShareTensor(ctx.party_id, fresh.degree,
                       vals.reshape(op.out_shape), s)


def zero_reshaped(zero, shape, scheme):
    if zero.shape == tuple(shape):
        return zero
    return ShareTensor(zero.party_id, zero.degree,
                       zero.values.reshape(shape), scheme)


def sss_truncation(ctx, op, x, alpha, comp, tag=None):
    """Exact masked floor division. Front ranks mask and hand the elite a
    reconstructible offset value; the elite divides in plaintext (plus the
    merged pool divisor, rounding half away) and deals fresh shares; every
    rank then cancels the mask remnant. Returns the output share on all
    ranks."""
    s = ctx.scheme
    f = s.field
    tag = tag or op.name
    k = s.k
    step = op.r * op.divisor
    lo = -op.value_bound + step       # masked value is never below this

    if ctx.rank <= k:
        if x is None:
            raise ProtocolError(f"rank {ctx.rank} missing input for {op.name}")
        masked = share_add(x, alpha)
        if ctx.is_elite:
            points = [masked]
            for r in range(2, k + 1):
                points.append(ctx.recv_share(
                    r, Phase.TRUNC_MASKED, tag=f"{tag}.masked", masked=True,
                    elements=masked.size))
            v = s.rec(points, m=k)
            shifted = _window_decode(v, lo, f.p)
            if ctx.audit is not None:
                ctx.audit.reconstructed(f"{tag}.masked", masked=True,
                                        note="additive mask")
            t = shifted // op.r
            if op.divisor > 1:
                t = round_half_away(t, op.divisor)
            fresh = s.gen(t % f.p, ctx.rng)
            mine = None
            for rank, st in enumerate(fresh, start=1):
                if rank == 1:
                    mine = st
                else:
                    ctx.send_share(rank, Phase.SHARE_DIST, st)
            out = mine
        else:
            ctx.send_share(1, Phase.TRUNC_MASKED, masked)
            out = ctx.recv_share(1, Phase.SHARE_DIST, tag=f"{tag}.out",
                                 masked=False, own=True)
    else:
        out = ctx.recv_share(1, Phase.SHARE_DIST, tag=f"{tag}.out",
                             masked=False, own=True)
    return share_add(out, comp)


def sss_nonlinear(ctx, op, x, beta, beta_inv, tag=None):
    """Relu and pooling behind a positive one-time factor. Participants
    multiply elementwise by the factor (degree doubles, so reconstruction
    pulls in all 2k-1 of them); the elite computes the nonlinearity on the
    masked plaintext, broadcasts, and everyone divides the factor back out.
    Returns the output share on every rank that receives the broadcast."""
    s = ctx.scheme
    f = s.field
    tag = tag or op.name
    k = s.k
    m = 2 * k - 1

    if ctx.is_participant:
        if x is None:
            raise ProtocolError(f"rank {ctx.rank} missing input for {op.name}")
        masked = ShareTensor(ctx.party_id, x.degree + beta.degree,
                             (x.values * beta.values) % f.p, s)
        if not ctx.is_elite:
            ctx.send_share(1, Phase.NONLIN_MASKED, masked)

    plain = None
    if ctx.is_elite:
        points = [masked]
        for r in range(2, m + 1):
            points.append(ctx.recv_share(
                r, Phase.NONLIN_MASKED, tag=f"{tag}.masked", masked=True,
                elements=masked.size))
        v = s.rec(points, m=m)
        ints = f.decode_signed(v)
        if ctx.audit is not None:
            ctx.audit.reconstructed(f"{tag}.masked", masked=True,
                                    note="multiplicative mask")
        if op.relu:
            ints = np.where(ints > 0, ints, 0)
        if op.pool_kind == "max":
            ints = pool_blocks(ints.reshape(op.in_shape), *op.pool).max(axis=(2, 4))
        elif op.pool_kind == "sum":
            ints = pool_blocks(ints.reshape(op.in_shape), *op.pool).sum(axis=(2, 4))
        plain = f.encode_signed(ints.reshape(op.out_shape))
        fan_out = range(2, (s.n if op.passive_out else k) + 1)
        payload = encode_plain_tensor(plain)
        for rank in fan_out:
            ctx.transport.send(rank, Phase.NONLIN_PLAIN, payload,
                               elements=int(plain.size))
    elif ctx.rank <= (s.n if op.passive_out else k):
        payload = ctx.transport.recv(1, Phase.NONLIN_PLAIN,
                                     elements=_count(op.out_shape))
        plain = decode_plain_tensor(payload)
        if ctx.audit is not None:
            ctx.audit.share_received(f"{tag}.plain", src=1, masked=True)

    if plain is None:
        return None
    return ShareTensor(ctx.party_id, beta_inv.degree,
                       (plain * beta_inv.values) % f.p, s)
