"""Why truncation needs a protocol of its own.

Fixed-point multiplication doubles the scale, so every product must be
divided back down by r. Dividing each share locally looks tempting and
is silently wrong: share arithmetic lives mod p, where floor division
does not commute with interpolation. The masked protocol adds a shared
multiple-of-r offset, lets the elite divide the masked plaintext, and
subtracts the offset's quotient afterwards.
"""

import threading

import numpy as np

from ssnet.field import PrimeField
from ssnet.layers import ScheduledOp, sss_truncation
from ssnet.masks import gen_additive_mask
from ssnet.protocol import PartyContext
from ssnet.sss import ShareTensor, SssScheme
from ssnet.transport import SimHub

F11 = PrimeField(11)


def run_parties(scheme, fn, seed=0):
    hub = SimHub(range(1, scheme.n + 1))
    results, threads = {}, []
    for rank in range(1, scheme.n + 1):
        ctx = PartyContext(scheme, rank, hub.transport(rank),
                           rng=np.random.default_rng([seed, rank]))
        threads.append(threading.Thread(
            target=lambda ctx=ctx: results.__setitem__(ctx.rank, fn(ctx))))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def main():
    s = SssScheme(F11, 2, 3)
    x, r = 5, 2
    shares = [ShareTensor(i + 1, 1, np.array(v, dtype=object), s)
              for i, v in enumerate((0, 6, 1))]
    print(f"x = {x} shared in F_11 as (0, 6, 1); want x // {r} = {x // r}")

    naive = [ShareTensor(st.party_id, 1,
                         np.array(int(st.values) // r, dtype=object), s)
             for st in shares]
    print("dividing each share in place gives shares (0, 3),"
          f" which reconstruct to {int(s.rec(naive[:2]))}  (wrong)")

    rng = np.random.default_rng(7)
    op = ScheduledOp("truncation", 0, "div", (), (), r=r, value_bound=5)
    alpha, comp, e = gen_additive_mask((), r, 1, s, rng, 5)
    results = run_parties(s, lambda ctx: sss_truncation(
        ctx, op, shares[ctx.rank - 1], alpha[ctx.rank - 1],
        comp[ctx.rank - 1]), seed=5)
    secure = F11.decode_signed(
        np.array(int(s.rec([results[1], results[2]])), dtype=object))
    print(f"masked protocol (offset e = {int(e)}) reconstructs to"
          f" {int(secure)}  (right)")


if __name__ == "__main__":
    main()
