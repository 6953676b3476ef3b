"""Prime field arithmetic for secret sharing.

Field values are canonical Python ints in [0, p). Tensor operands are numpy
arrays with dtype=object holding those ints, so every intermediate product is
exact arbitrary-precision integer math; nothing is ever squeezed through a
float or a fixed-width machine word. The same expressions work on scalars and
on object arrays, which keeps the hot paths vectorized.

Signed values are folded into the field by the usual two's-complement-like
embedding: x >= 0 maps to x, x < 0 maps to p - |x|, with |x| <= (p-1)/2.

split_mul is a separately selectable multiplication routine that emulates an
environment where no intermediate may reach 2**53 (double-precision exactness
on accelerators): operands are cut into 23-bit limbs, partial products are
regrouped, and the 2**46 carry weight is folded in through its small residue.
"""

import numpy as np

# 45-bit default modulus, 2**45 - 55.
DEFAULT_PRIME = 35184372088777

LIMB_BITS = 23
LIMB_MASK = (1 << LIMB_BITS) - 1

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class FieldMismatch(ValueError):
    pass


class SingularMatrix(ValueError):
    pass


def is_prime(n):
    """Deterministic Miller-Rabin for n < 2**64."""
    if n < 2:
        return False
    for q in _MR_BASES:
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


class PrimeField:
    """Arithmetic mod a prime p, on ints and on object-dtype ndarrays."""

    def __init__(self, p=DEFAULT_PRIME):
        if not is_prime(p):
            raise ValueError(f"{p} is not prime")
        self.p = p
        self.element_bits = p.bit_length()
        self.wire_bytes = 8
        if p.bit_length() > 64:
            raise ValueError("field elements must fit the 8-byte wire format")
        # any sum of up to 2**13 products of two elements stays exact
        assert 2 * self.element_bits + 13 <= 128
        self.half = (p - 1) // 2
        # residue of the split-multiplication carry weight 2**(2*LIMB_BITS)
        self._carry_residue = (1 << (2 * LIMB_BITS)) % p

    def __repr__(self):
        return f"PrimeField({self.p})"

    def __eq__(self, other):
        return isinstance(other, PrimeField) and other.p == self.p

    def __hash__(self):
        return hash(("PrimeField", self.p))

    # -- core ops (scalar int or object ndarray) --

    def add(self, a, b):
        return (a + b) % self.p

    def sub(self, a, b):
        return (a - b) % self.p

    def neg(self, a):
        return (-a) % self.p

    def mul(self, a, b):
        return (a * b) % self.p

    def inv(self, a):
        """Multiplicative inverse by extended Euclid. 1/0 raises."""
        if isinstance(a, np.ndarray):
            return np.frompyfunc(self._inv_int, 1, 1)(a)
        return self._inv_int(a)

    def _inv_int(self, a):
        a = int(a) % self.p
        if a == 0:
            raise ZeroDivisionError("no inverse of 0 in a field")
        lm, hm = 1, 0
        low, high = a, self.p
        while low > 1:
            r = high // low
            lm, low, hm, high = hm - lm * r, high - low * r, lm, low
        return lm % self.p

    # -- signed embedding --

    def encode_signed(self, x):
        if isinstance(x, np.ndarray):
            lo, hi = int(x.min()), int(x.max())
            if lo < -self.half or hi > self.half:
                raise ValueError(f"value outside +/-{self.half}")
            return x.astype(object) % self.p
        if x < -self.half or x > self.half:
            raise ValueError(f"value outside +/-{self.half}")
        return x % self.p

    def decode_signed(self, v):
        if isinstance(v, np.ndarray):
            return np.where(v > self.half, v - self.p, v)
        v = int(v)
        return v - self.p if v > self.half else v

    # -- sampling --

    def rand(self, rng, shape=None):
        """Uniform element(s) in [0, p). rng is a numpy Generator."""
        if shape is None:
            return int(rng.integers(0, self.p))
        return rng.integers(0, self.p, size=shape, dtype=np.int64).astype(object)

    # -- split multiplication (53-bit-bounded emulation) --

    def split_mul(self, a, b, trace=None):
        """Multiply mod p without any intermediate reaching 2**53.

        Operands are split into 23-bit limbs, the two middle partial products
        are re-split, and the high group is folded in through the residue of
        2**46. When trace is a list, every intermediate's maximum is appended
        as (name, value) so callers can assert the 2**53 bound.
        """
        if self._carry_residue.bit_length() > 7:
            raise ValueError("split_mul needs 2**46 mod p to fit 7 bits")
        a_h, a_l = a >> LIMB_BITS, a & LIMB_MASK
        b_h, b_l = b >> LIMB_BITS, b & LIMB_MASK
        c_hh = a_h * b_h
        c_hl = a_h * b_l
        c_lh = a_l * b_h
        c_ll = a_l * b_l
        # middle products get re-split so the carry group stays narrow
        hi = c_hh + (c_hl >> LIMB_BITS) + (c_lh >> LIMB_BITS)
        lo = (((c_hl & LIMB_MASK) + (c_lh & LIMB_MASK)) << LIMB_BITS) + c_ll
        folded = hi * self._carry_residue
        total = folded + lo
        if trace is not None:
            for name, v in (("c_hh", c_hh), ("c_hl", c_hl), ("c_lh", c_lh),
                            ("c_ll", c_ll), ("hi", hi), ("lo", lo),
                            ("folded", folded), ("total", total)):
                trace.append((name, int(v.max()) if isinstance(v, np.ndarray) else int(v)))
        return total % self.p

    # -- linear algebra --

    def mat_inv(self, m):
        """Gauss-Jordan inverse of a square object-dtype matrix mod p."""
        m = np.array(m, dtype=object) % self.p
        rows = m.shape[0]
        if m.shape != (rows, rows):
            raise ValueError("matrix must be square")
        aug = np.concatenate([m, np.eye(rows, dtype=int).astype(object)], axis=1)
        for col in range(rows):
            pivot = next((r for r in range(col, rows) if aug[r, col] != 0), None)
            if pivot is None:
                raise SingularMatrix(f"no pivot in column {col}")
            if pivot != col:
                aug[[col, pivot]] = aug[[pivot, col]]
            aug[col] = aug[col] * self._inv_int(aug[col, col]) % self.p
            for r in range(rows):
                if r != col and aug[r, col] != 0:
                    aug[r] = (aug[r] - aug[r, col] * aug[col]) % self.p
        return aug[:, rows:]


class FieldElement:
    """Scalar wrapper with operator sugar and field-mismatch checks."""

    __slots__ = ("value", "field")

    def __init__(self, value, field):
        self.value = int(value) % field.p
        self.field = field

    def _coerce(self, other):
        if isinstance(other, FieldElement):
            if other.field != self.field:
                raise FieldMismatch("operands from different fields")
            return other.value
        return int(other) % self.field.p

    def __add__(self, other):
        return FieldElement(self.value + self._coerce(other), self.field)

    __radd__ = __add__

    def __sub__(self, other):
        return FieldElement(self.value - self._coerce(other), self.field)

    def __rsub__(self, other):
        return FieldElement(self._coerce(other) - self.value, self.field)

    def __mul__(self, other):
        return FieldElement(self.value * self._coerce(other), self.field)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return FieldElement(self.value * self.field._inv_int(self._coerce(other)), self.field)

    def __neg__(self):
        return FieldElement(-self.value, self.field)

    def __eq__(self, other):
        if isinstance(other, FieldElement):
            return self.field == other.field and self.value == other.value
        return self.value == int(other) % self.field.p

    def __hash__(self):
        return hash((self.value, self.field.p))

    def __int__(self):
        return self.value

    def __repr__(self):
        return f"{self.value} (mod {self.field.p})"
