"""Interactive protocols over shared tensors.

Ranks run 1..n in the order of the scheme's party ids; rank 0 is the
offline mask source. Within a run the roles are positional:

  elite        rank 1; reconstructs masked values and deals fresh shares
  front        ranks 1..k; receive sub-shares during degree reduction
  actives      ranks 2..k; send masked shares to the elite
  participants ranks 1..2k-1; enough points to define a product polynomial
  passives     every other rank; hold shares and apply local masks only

All receives are addressed (peer plus expected phase), so a divergent
schedule fails loudly instead of consuming a stranger's frame. Every
function takes the party's own view and returns its local result; callers
on different ranks must invoke the same functions in the same order.
"""

from dataclasses import dataclass, field as dc_field
import json
import struct

import numpy as np

from . import wire
from .masks import gen_additive_mask, gen_multiplicative_mask, gen_zero_shares
from .sss import DegreeMismatch, ShareTensor, share_add
from .wire import Phase


class AuditLog:
    """Per-party record of what crossed the wire and what was reconstructed.

    masked=True marks values protected by a one-time mask (safe to pool),
    masked=False marks raw shares of a persistent secret, and own=True marks
    points of the receiver's own fresh share (reconstructing those is the
    point of resharing). A party that collects k or more raw foreign shares
    under one tag could reconstruct the secret behind them; the scanner
    flags that, plus any unmasked reconstruction outside the whitelist.
    """

    def __init__(self, rank):
        self.rank = rank
        self.events = []

    def share_received(self, tag, src, masked, own=False):
        self.events.append(
            {"kind": "share", "tag": tag, "src": src, "masked": bool(masked),
             "own": bool(own)})

    def reconstructed(self, tag, masked, note=""):
        self.events.append(
            {"kind": "rec", "tag": tag, "masked": bool(masked), "note": note})


def audit_violations(logs, k, allowed_plain=("output",)):
    """Scan AuditLogs for threshold breaches. Returns a list of strings,
    empty when the run respected the sharing threshold."""
    problems = []
    for log in logs:
        seen = {}
        for ev in log.events:
            if ev["kind"] == "share" and not ev["masked"] and not ev.get("own"):
                seen.setdefault(ev["tag"], set()).add(ev["src"])
            elif ev["kind"] == "rec" and not ev["masked"]:
                if ev["tag"] not in allowed_plain:
                    problems.append(
                        f"rank {log.rank}: unmasked reconstruction of {ev['tag']!r}")
        for tag, srcs in seen.items():
            if len(srcs) >= k:
                problems.append(
                    f"rank {log.rank}: holds {len(srcs)} raw shares of {tag!r} "
                    f"(threshold {k})")
    return problems


@dataclass
class PartyContext:
    """Everything one rank needs to run the online protocol."""

    scheme: object
    rank: int
    transport: object
    rng: object = None
    audit: AuditLog = None
    bundle: dict = dc_field(default_factory=dict)

    @property
    def party_id(self):
        return self.scheme.party_ids[self.rank - 1]

    @property
    def k(self):
        return self.scheme.k

    @property
    def n(self):
        return self.scheme.n

    @property
    def is_elite(self):
        return self.rank == 1

    @property
    def is_front(self):
        return self.rank <= self.k

    @property
    def is_participant(self):
        return self.rank <= 2 * self.k - 1

    def send_share(self, dst, phase, st):
        self.transport.send(dst, phase, wire.encode_share_tensor(st),
                            elements=st.size)

    def recv_share(self, src, phase, tag, masked, own=False, elements=0):
        payload = self.transport.recv(src, phase, elements=elements)
        st = wire.decode_share_tensor(payload, self.scheme)
        if self.audit is not None:
            self.audit.share_received(tag, src, masked, own=own)
        return st

    def send_plain(self, dst, phase, values):
        self.transport.send(dst, phase, wire.encode_plain_tensor(values),
                            elements=int(np.asarray(values).size))

    def recv_plain(self, src, phase, elements=0):
        payload = self.transport.recv(src, phase, elements=elements)
        return wire.decode_plain_tensor(payload)


def reshare_degree_reduce(ctx, y, passive_out=True, tag="red"):
    """Lower a product share's degree from 2k-2 back to k-1 without
    revealing any party's share to anyone.

    Step 1: each participant deals a fresh k-of-k sharing of its own share
    to the front ranks (keeping its own point; no self-send).
    Step 2: each front rank applies the public reducing matrix to its stack
    of sub-shares, yielding its point on every output party's new share.
    Step 3: each output party collects k points and reconstructs its
    reduced share. passive_out widens the output set from the front ranks
    to all n parties (needed when the next step involves everyone).
    """
    s = ctx.scheme
    k, n = s.k, s.n
    if k == 1:
        return y
    if ctx.is_participant and (y is None or y.degree != 2 * (k - 1)):
        got = "nothing" if y is None else f"degree {y.degree}"
        raise DegreeMismatch(f"expected a product share, got {got}")
    f = s.field
    m = 2 * k - 1
    out_ranks = list(range(1, (n if passive_out else k) + 1))
    front_ids = s.front_ids

    # step 1: deal sub-shares of our own product share to the front
    sub_rows = None
    if ctx.is_participant:
        subs = s.gen(y.values, ctx.rng, ids=front_ids)
        for j in range(1, k + 1):
            if j == ctx.rank:
                sub_rows = subs[j - 1]
            else:
                ctx.send_share(j, Phase.RESHARE_OUT, subs[j - 1])

    result = None
    if ctx.is_front:
        # step 2: stack one sub-share per participant, ascending
        stack = []
        for i in range(1, m + 1):
            if i == ctx.rank:
                stack.append(sub_rows.values)
            else:
                st = ctx.recv_share(i, Phase.RESHARE_OUT,
                                    tag=f"{tag}.src{i}", masked=False)
                stack.append(st.values)
        flat = np.stack([v.ravel() for v in stack])          # (2k-1, numel)
        reducing = s.reducing_matrix()                       # (2k-1, n)
        rows = (reducing.T[:len(out_ranks)] @ flat) % f.p    # (out, numel)
        # step 3: hand every output party its point on the new polynomial
        for t in out_ranks:
            row = ShareTensor(ctx.party_id, k - 1,
                              rows[t - 1].reshape(y.shape), s)
            if t == ctx.rank:
                result = row
            else:
                ctx.send_share(t, Phase.RESHARE_BACK, row)

    if ctx.rank in out_ranks:
        points = []
        for j in range(1, k + 1):
            if j == ctx.rank:
                points.append(result)
            else:
                points.append(ctx.recv_share(j, Phase.RESHARE_BACK,
                                             tag=f"{tag}.out", masked=False,
                                             own=True))
        vals = s.rec(points, m=k)
        return ShareTensor(ctx.party_id, k - 1, vals, s)
    return None


def naive_degree_reduce(ctx, y, tag="red"):
    """Broken one-step reduction, kept as a warning sign. Each participant
    scales its product share by a public matrix entry and sends the result
    straight to the output parties. The value comes out right, but every
    addend is a raw share times a public constant, so a recipient divides
    the constant back out and pockets 2k-2 foreign shares: beyond the
    threshold, secret gone.

    Returns (reduced_share, leak). At the elite, leak is a dict holding the
    foreign shares it recovered and the reconstructed plaintext.
    """
    s = ctx.scheme
    k = s.k
    f = s.field
    m = 2 * k - 1
    if y.degree != 2 * (k - 1):
        raise DegreeMismatch(f"expected a product share, got degree {y.degree}")
    out_ranks = list(range(1, m + 1))
    reducing = s.reducing_matrix()

    if ctx.is_participant:
        for t in out_ranks:
            if t == ctx.rank:
                continue
            addend = (y.values * reducing[ctx.rank - 1, t - 1]) % f.p
            ctx.send_plain(t, Phase.RESHARE_OUT, addend)

    if ctx.rank not in out_ranks:
        return None, None

    total = (y.values * reducing[ctx.rank - 1, ctx.rank - 1]) % f.p
    foreign = {}
    for i in range(1, m + 1):
        if i == ctx.rank:
            continue
        addend = ctx.recv_plain(i, Phase.RESHARE_OUT)
        if ctx.audit is not None:
            ctx.audit.share_received(f"{tag}.raw", src=i, masked=False)
        total = (total + addend) % f.p
        # the flaw: the scaling factor is public, divide it out
        factor = int(reducing[i - 1, ctx.rank - 1])
        if factor:
            foreign[i] = (addend * f.inv(factor)) % f.p
    reduced = ShareTensor(ctx.party_id, k - 1, total, s)

    leak = None
    if ctx.is_elite and len(foreign) == m - 1:
        points = [ShareTensor(s.party_ids[i - 1], 2 * (k - 1), v, s)
                  for i, v in sorted(foreign.items())]
        points.append(ShareTensor(ctx.party_id, 2 * (k - 1), y.values, s))
        stolen = s.rec(points, m=m)
        if ctx.audit is not None:
            ctx.audit.reconstructed(f"{tag}.secret", masked=False,
                                    note="recovered from scaled raw shares")
        leak = {"foreign_shares": foreign, "secret": stolen}
    return reduced, leak


def rerand(x, zeros):
    """Add a fresh sharing of zero: same value, brand new polynomial."""
    if zeros.degree != x.degree:
        raise DegreeMismatch(
            f"zero share degree {zeros.degree} != value degree {x.degree}")
    return share_add(x, zeros)


def distributed_zero_shares(ctx, shape, metrics=None):
    """Dealer-free zero sharing: every party deals zero and everyone sums
    one share from each deal. Costs n*(n-1) elements per tensor element,
    which is why the engine prefers source-dealt zeros when a source exists.
    """
    s = ctx.scheme
    if metrics is not None:
        metrics.set_op(ctx.rank, "zero_dist")
    deal = s.gen(np.zeros(tuple(shape), dtype=object), ctx.rng)
    for dst in range(1, s.n + 1):
        if dst != ctx.rank:
            ctx.send_share(dst, Phase.SHARE_DIST, deal[dst - 1])
    total = deal[ctx.rank - 1]
    for src in range(1, s.n + 1):
        if src != ctx.rank:
            st = ctx.recv_share(src, Phase.SHARE_DIST,
                                tag="zero_dist", masked=True)
            total = share_add(total, st)
    return total


def output_collect(ctx, y, tag="output"):
    """Final disclosure: active ranks hand the elite their output shares and
    the elite reconstructs. Returns the signed integer tensor at the elite,
    None elsewhere."""
    s = ctx.scheme
    if ctx.is_elite:
        points = [y]
        for r in range(2, s.k + 1):
            points.append(ctx.recv_share(r, Phase.OUTPUT_SHARE,
                                         tag=tag, masked=False))
        vals = s.rec(points, m=s.k)
        if ctx.audit is not None:
            ctx.audit.reconstructed(tag, masked=False, note="final output")
        return s.field.decode_signed(vals)
    if ctx.rank <= s.k:
        ctx.send_share(1, Phase.OUTPUT_SHARE, y)
    return None


class MaskBundle:
    """One party's offline material, keyed (op_index, name). Serializable
    so the source can ship it in a single frame."""

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def put(self, op_index, name, st):
        self.entries[(op_index, name)] = st

    def take(self, op_index, name):
        return self.entries.pop((op_index, name))

    def element_count(self):
        return sum(st.size for st in self.entries.values())

    def encode(self) -> bytes:
        meta = []
        blobs = []
        for (idx, name) in sorted(self.entries):
            st = self.entries[(idx, name)]
            meta.append({"op": idx, "name": name, "party_id": st.party_id,
                         "degree": st.degree, "shape": list(st.shape)})
            blobs.append(wire.encode_elements(st.values.ravel().tolist()))
        head = json.dumps(meta, sort_keys=True).encode()
        return struct.pack("<I", len(head)) + head + b"".join(blobs)

    @classmethod
    def decode(cls, buf: bytes, scheme):
        (hlen,) = struct.unpack_from("<I", buf, 0)
        meta = json.loads(buf[4:4 + hlen].decode())
        off = 4 + hlen
        entries = {}
        for item in meta:
            shape = tuple(item["shape"])
            count = 1
            for d in shape:
                count *= d
            vals = wire.decode_elements(buf[off:off + 8 * count], count)
            off += 8 * count
            arr = np.array(vals, dtype=object).reshape(shape)
            entries[(item["op"], item["name"])] = ShareTensor(
                item["party_id"], item["degree"], arr, scheme)
        return cls(entries)


def trusted_source_prepare(schedule, scheme, rng, record_plain=False):
    """Walk a schedule and draw every mask the online phase will consume.

    Returns (bundles, plain): bundles maps rank -> MaskBundle; plain (only
    when record_plain) maps op index to the raw mask tensors, for tests that
    check the mask algebra end to end.
    """
    bundles = {rank: MaskBundle() for rank in range(1, scheme.n + 1)}
    plain = {} if record_plain else None

    def spread(idx, name, shares):
        for rank, st in enumerate(shares, start=1):
            bundles[rank].put(idx, name, st)

    for idx, op in enumerate(schedule):
        if op.kind == "linear":
            spread(idx, "zero", gen_zero_shares(op.out_shape, scheme, rng))
        elif op.kind == "truncation":
            alpha, comp, e = gen_additive_mask(
                op.in_shape, op.r, op.divisor, scheme, rng, op.value_bound)
            spread(idx, "alpha", alpha)
            spread(idx, "comp", comp)
            if record_plain:
                plain[idx] = {"e": e}
        elif op.kind == "nonlinear":
            beta, beta_inv, beta_plain = gen_multiplicative_mask(
                op.in_shape, scheme, rng, pool=op.pool,
                value_bound=op.value_bound)
            spread(idx, "beta", beta)
            spread(idx, "beta_inv", beta_inv)
            if record_plain:
                plain[idx] = {"beta": beta_plain}
        elif op.kind != "output":
            raise ValueError(f"unknown op kind {op.kind!r}")
    return bundles, plain
