"""Shamir threshold sharing of integer tensors.

A (k, n) scheme hides a tensor of field values inside n share tensors, one
per party, by evaluating an independent random degree-(k-1) polynomial per
element at that party's nonzero ID. Any k shares rebuild the secret through
Lagrange weights evaluated at 0; fewer than k reveal nothing.

Pointwise share products are again valid shares, but of the elementwise
product and at degree 2k-2, which is why a scheme needs n >= 2k-1 parties
before multiplication results can ever be reconstructed or re-reduced. The
reducing matrix turns a vector of 2k-1 degree-(2k-2) shares back into
degree-(k-1) shares of the same secrets: it conjugates a truncating projection
with the Vandermonde matrix of the participating IDs, so applying it is the
linear-algebra mirror of "drop every coefficient above x**(k-1)".
"""

from dataclasses import dataclass

import numpy as np

from .field import FieldMismatch, PrimeField


class InsufficientShares(ValueError):
    pass


class DuplicateIds(ValueError):
    pass


class DegreeOverflow(ValueError):
    pass


class DegreeMismatch(ValueError):
    pass


def _as_field_array(x, p):
    arr = np.asarray(x)
    if arr.dtype != object:
        arr = arr.astype(object)
    arr = arr % p
    if not isinstance(arr, np.ndarray):
        # numpy collapses 0-d results to scalars; keep the array type
        arr = np.asarray(arr, dtype=object)
    return arr


@dataclass(frozen=True)
class ShareTensor:
    """One party's share of a secret tensor. Immutable."""

    party_id: int
    degree: int
    values: np.ndarray
    scheme: "SssScheme"

    def __post_init__(self):
        vals = _as_field_array(self.values, self.scheme.field.p)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return (f"ShareTensor(id={self.party_id}, degree={self.degree}, "
                f"shape={self.values.shape})")


class SssScheme:
    """A (k, n) sharing scheme over a prime field with fixed party IDs."""

    def __init__(self, field: PrimeField, k: int, n: int, party_ids=None):
        if k < 1:
            raise ValueError("threshold k must be at least 1")
        if n < max(k, 2 * k - 1):
            raise ValueError("need n >= 2k-1 parties to support multiplication")
        if party_ids is None:
            party_ids = tuple(range(1, n + 1))
        party_ids = tuple(int(i) for i in party_ids)
        if len(party_ids) != n:
            raise ValueError("one ID per party")
        reduced = [i % field.p for i in party_ids]
        if any(i == 0 for i in reduced):
            raise ValueError("party IDs must be nonzero mod p")
        if len(set(reduced)) != n:
            raise DuplicateIds("party IDs must be distinct mod p")
        self.field = field
        self.k = k
        self.n = n
        self.party_ids = party_ids
        self._weights = {}
        self._reducing = None

    def __repr__(self):
        return f"SssScheme(k={self.k}, n={self.n}, p={self.field.p})"

    @property
    def front_ids(self):
        """Elite plus active parties: the first k IDs."""
        return self.party_ids[: self.k]

    @property
    def participating_ids(self):
        """The 2k-1 parties that take part in degree reduction."""
        return self.party_ids[: 2 * self.k - 1]

    # -- share generation --

    def gen(self, secret, rng=None, ids=None, coeffs=None):
        """Share a tensor: one fresh degree-(k-1) polynomial per element.

        ids defaults to all n party IDs; passing a subset (e.g. the front k)
        produces a sub-sharing for just those parties. coeffs pins the
        polynomial coefficients instead of drawing them from rng; scalars
        broadcast over the tensor.
        """
        f = self.field
        secret = _as_field_array(secret, f.p)
        if ids is None:
            ids = self.party_ids
        if coeffs is None:
            if self.k > 1 and rng is None:
                raise ValueError("need an rng (or explicit coeffs) when k > 1")
            coeffs = [f.rand(rng, secret.shape) for _ in range(self.k - 1)]
        else:
            if len(coeffs) != self.k - 1:
                raise ValueError(f"expected {self.k - 1} coefficients")
            coeffs = [np.broadcast_to(_as_field_array(c, f.p), secret.shape)
                      for c in coeffs]
        shares = []
        for pid in ids:
            acc = secret
            pw = 1
            for c in coeffs:
                pw = pw * pid % f.p
                acc = (acc + c * pw) % f.p
            shares.append(ShareTensor(pid, self.k - 1, acc, self))
        return shares

    # -- reconstruction --

    def lagrange_weights(self, ids):
        """Weights w_i with sum(w_i * share_i) = secret, for this ID subset."""
        ids = tuple(ids)
        got = self._weights.get(ids)
        if got is not None:
            return got
        f = self.field
        if len(set(i % f.p for i in ids)) != len(ids):
            raise DuplicateIds(f"IDs not distinct: {ids}")
        weights = []
        for i in ids:
            num, den = 1, 1
            for j in ids:
                if j != i:
                    num = num * j % f.p
                    den = den * (j - i) % f.p
            weights.append(num * f._inv_int(den) % f.p)
        weights = tuple(weights)
        self._weights[ids] = weights
        return weights

    def rec(self, shares, m=None):
        """Reconstruct from the first m shares. Needs m >= degree + 1."""
        if m is None:
            m = len(shares)
        if m > len(shares):
            raise InsufficientShares(f"asked for {m} shares, have {len(shares)}")
        shares = list(shares)[:m]
        deg = shares[0].degree
        for s in shares:
            if s.scheme.field != self.field:
                raise FieldMismatch("share from a different field")
            if s.degree != deg:
                raise DegreeMismatch("shares at mixed degrees")
            if s.shape != shares[0].shape:
                raise ValueError("shares with mismatched shapes")
        if m < deg + 1:
            raise InsufficientShares(f"degree {deg} needs {deg + 1} shares, got {m}")
        weights = self.lagrange_weights(tuple(s.party_id for s in shares))
        f = self.field
        acc = shares[0].values * weights[0] % f.p
        for s, w in zip(shares[1:], weights[1:]):
            acc = (acc + s.values * w) % f.p
        return acc

    # -- degree reduction matrix --

    def reducing_matrix(self):
        """Constant matrix R mapping stacked degree-(2k-2) shares of the
        2k-1 participating parties to degree-(k-1) shares for all n parties.

        R = B^-1 P B where B is the Vandermonde matrix of participating IDs
        and P keeps only the k low-order coefficient rows. Columns for IDs
        beyond the participating set (when n > 2k-1) extend B on the right.
        """
        if self._reducing is not None:
            return self._reducing
        f = self.field
        part = self.participating_ids
        rows = len(part)
        b = np.empty((rows, rows), dtype=object)
        b_ext = np.empty((rows, self.n), dtype=object)
        for i in range(rows):
            for j, pid in enumerate(part):
                b[i, j] = pow(pid, i, f.p)
            for j, pid in enumerate(self.party_ids):
                b_ext[i, j] = pow(pid, i, f.p)
        b_inv = f.mat_inv(b)
        # P zeroes every row of b_ext past the first k
        r = b_inv[:, : self.k] @ b_ext[: self.k, :] % f.p
        r.flags.writeable = False
        self._reducing = r
        return r


# -- pointwise share arithmetic --


def _check_aligned(a, b):
    if a.scheme is not b.scheme and a.scheme.field != b.scheme.field:
        raise FieldMismatch("shares from different fields")
    if a.party_id != b.party_id:
        raise ValueError(f"shares for different parties: {a.party_id} vs {b.party_id}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def share_add(a: ShareTensor, b) -> ShareTensor:
    """a + b. b may be a ShareTensor at the same degree, or a plain value."""
    f = a.scheme.field
    if isinstance(b, ShareTensor):
        _check_aligned(a, b)
        if a.degree != b.degree:
            raise DegreeMismatch(f"degree {a.degree} + degree {b.degree}")
        return ShareTensor(a.party_id, a.degree, (a.values + b.values) % f.p, a.scheme)
    return ShareTensor(a.party_id, a.degree,
                       (a.values + _as_field_array(b, f.p)) % f.p, a.scheme)


def share_sub(a: ShareTensor, b) -> ShareTensor:
    f = a.scheme.field
    if isinstance(b, ShareTensor):
        _check_aligned(a, b)
        if a.degree != b.degree:
            raise DegreeMismatch(f"degree {a.degree} - degree {b.degree}")
        return ShareTensor(a.party_id, a.degree, (a.values - b.values) % f.p, a.scheme)
    return ShareTensor(a.party_id, a.degree,
                       (a.values - _as_field_array(b, f.p)) % f.p, a.scheme)


def share_mul(a: ShareTensor, b) -> ShareTensor:
    """Pointwise product. share * share adds degrees (k-1 each, so 2k-2);
    share * plain keeps the degree. Degrees past 2k-2 cannot be rebuilt by
    any party set, so they raise."""
    f = a.scheme.field
    if isinstance(b, ShareTensor):
        _check_aligned(a, b)
        out_degree = a.degree + b.degree
        if out_degree > 2 * (a.scheme.k - 1):
            raise DegreeOverflow(
                f"degree {a.degree} * degree {b.degree} exceeds 2k-2 = "
                f"{2 * (a.scheme.k - 1)}")
        return ShareTensor(a.party_id, out_degree,
                           (a.values * b.values) % f.p, a.scheme)
    return ShareTensor(a.party_id, a.degree,
                       (a.values * _as_field_array(b, f.p)) % f.p, a.scheme)
