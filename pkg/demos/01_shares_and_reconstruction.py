"""Sharing a secret and putting it back together.

A (k,n) scheme hides a value as n points on a random degree-(k-1)
polynomial. Any k points pin the polynomial down; fewer than k leave
every candidate secret equally plausible.
"""

import numpy as np

from ssnet.field import PrimeField
from ssnet.sss import SssScheme

F11 = PrimeField(11)


def main():
    s = SssScheme(F11, 2, 3)
    rng = np.random.default_rng(1)

    secret = 6
    shares = s.gen(secret, rng)
    print(f"secret {secret} in F_11, scheme (k=2, n=3)")
    print("shares:", [(st.party_id, int(st.values)) for st in shares])

    for i, j in ((0, 1), (0, 2), (1, 2)):
        got = int(s.rec([shares[i], shares[j]]))
        print(f"  parties ({i + 1},{j + 1}) reconstruct -> {got}")

    # one share alone: every secret in the field fits some polynomial
    lone = shares[0]
    candidates = sorted({(int(lone.values) - a * lone.party_id) % 11
                         for a in range(11)})
    print(f"party 1's share alone is consistent with secrets {candidates}")

    # the production field encodes signed values around the modulus
    f = PrimeField()
    big = SssScheme(f, 3, 5)
    x = np.array([-1234, 0, 999999], dtype=object)
    enc = f.encode_signed(x)
    sh = big.gen(enc, rng)
    back = f.decode_signed(big.rec(sh[:3]))
    print(f"(3,5) over the 45-bit field: {x.tolist()} -> {back.tolist()}")


if __name__ == "__main__":
    main()
