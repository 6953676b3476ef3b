"""ReLU and pooling on values nobody gets to see.

Comparisons are the expensive part of secret-shared inference, so the
trick is to multiply each value by a shared positive factor beta first.
The elite reconstructs only beta*x: sign survives (relu works), and
because beta is constant across a pooling window, the window's order
survives too (max works). Afterwards everyone multiplies by the shared
inverse of beta, and the true value returns without ever being exposed.
"""

import threading

import numpy as np

from ssnet.field import PrimeField
from ssnet.layers import ScheduledOp, sss_nonlinear
from ssnet.masks import gen_multiplicative_mask
from ssnet.protocol import PartyContext
from ssnet.sss import SssScheme
from ssnet.transport import SimHub

F = PrimeField()
S23 = SssScheme(F, 2, 3)


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
    window = np.array([[3, 9], [-2, 5]]).reshape(1, 2, 2)
    print("plaintext window:", window.ravel().tolist(),
          "-> relu+max should give 9")

    rng = np.random.default_rng(14)
    xs_enc = F.encode_signed(np.array(window.tolist(), dtype=object))
    xs = S23.gen(xs_enc, rng)
    beta, beta_inv, plain_beta = gen_multiplicative_mask(
        (1, 2, 2), S23, rng, pool=(2, 2), value_bound=100)
    b = int(plain_beta.ravel()[0])
    print(f"window-constant mask beta = {b}")
    masked = (xs_enc * b) % F.p
    print("what the elite reconstructs:", masked.ravel().tolist())
    print("  signed view:", F.decode_signed(masked).ravel().tolist(),
          "(sign and window order survive, values do not)")

    op = ScheduledOp("nonlinear", 0, "nl", (1, 2, 2), (1, 1, 1),
                     relu=True, pool=(2, 2), pool_kind="max",
                     value_bound=100)
    results = run_parties(S23, lambda ctx: sss_nonlinear(
        ctx, op, xs[ctx.rank - 1], beta[ctx.rank - 1],
        beta_inv[ctx.rank - 1]), seed=7)
    out = F.decode_signed(S23.rec([results[1], results[2]]))
    print("reconstructed pooled output:", int(out.ravel()[0]))


if __name__ == "__main__":
    main()
