"""Share multiplication, degree reduction, and why shortcuts leak.

Multiplying shares pointwise multiplies the hidden polynomials, doubling
the degree: a (2,3) product needs all 3 shares to reconstruct. The
reshare protocol brings the degree back down without any party ever
holding k raw shares of the product. The naive alternative (send your
share to the elite, let it interpolate in the clear) gets the same
number but hands the elite the plaintext, which the audit log catches.
"""

import threading

import numpy as np

from ssnet.field import PrimeField
from ssnet.protocol import (AuditLog, PartyContext, audit_violations,
                            naive_degree_reduce, rerand,
                            reshare_degree_reduce)
from ssnet.sss import SssScheme, share_mul
from ssnet.transport import SimHub

F11 = PrimeField(11)


def run_parties(scheme, fn, seed=0, audit=False):
    hub = SimHub(range(1, scheme.n + 1))
    results, logs, threads = {}, [], []
    for rank in range(1, scheme.n + 1):
        log = AuditLog(rank) if audit else None
        if log is not None:
            logs.append(log)
        ctx = PartyContext(scheme, rank, hub.transport(rank),
                           rng=np.random.default_rng([seed, rank]), audit=log)
        threads.append(threading.Thread(
            target=lambda ctx=ctx: results.__setitem__(ctx.rank, fn(ctx))))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, logs


def main():
    s = SssScheme(F11, 2, 3)
    xs = s.gen(2, coeffs=[4])
    ys = s.gen(3, coeffs=[1])
    print("shares of 2:", [int(st.values) for st in xs])
    print("shares of 3:", [int(st.values) for st in ys])

    prod = {r: share_mul(xs[r - 1], ys[r - 1]) for r in (1, 2, 3)}
    print("product shares:", [int(prod[r].values) for r in (1, 2, 3)],
          f"(degree {prod[1].degree}, so all 3 are needed)")
    print("rec with all 3:", int(s.rec([prod[1], prod[2], prod[3]])))

    reduced, _ = run_parties(s, lambda ctx: reshare_degree_reduce(
        ctx, prod[ctx.rank], passive_out=True), seed=5)
    zeros = s.gen(0, coeffs=[4])
    post = {r: rerand(reduced[r], zeros[r - 1]) for r in (1, 2, 3)}
    print("reduced + rerandomized:", [int(post[r].values) for r in (1, 2, 3)],
          f"(degree {post[1].degree})")
    print("rec with only 2:", int(s.rec([post[1], post[2]])))

    results, logs = run_parties(s, lambda ctx: naive_degree_reduce(
        ctx, prod[ctx.rank]), seed=4, audit=True)
    _, leak = results[1]
    print("\nnaive shortcut: rank 1 reconstructed the plaintext product:",
          int(leak["secret"]))
    for problem in audit_violations(logs, s.k):
        print("  audit:", problem)


if __name__ == "__main__":
    main()
