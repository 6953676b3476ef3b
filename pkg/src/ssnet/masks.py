"""Offline mask material for the masked truncation and nonlinear steps.

Additive masks hide a value before its plaintext floor-division: the mask is
alpha = e * r * d for a fresh uniform e, so dividing the masked value by r
shifts the result by exactly e*d and adding the companion mask -e afterwards
cancels it. e is drawn from [1, emax] where emax respects both a 2**32
budget and the field window: the masked value must stay inside one interval
of length p so the reconstructing party can read it as an integer.

Multiplicative masks hide sign and order only up to a positive factor:
beta >= 1 scales every element, the plaintext side applies the nonlinearity
(relu, max) which commutes with positive scaling, and beta's inverse undoes
the factor. For pooling, beta is constant across each pooling window so the
in-window comparison is unaffected. Element count of the inverse matches the
nonlinear step's output, not its input.
"""

import numpy as np

E_BUDGET = 1 << 32
BETA_BITS = 28


def additive_mask_bound(field, step: int, value_bound: int) -> int:
    """Largest usable e for masks of stride `step` on values in
    [-value_bound, value_bound]. Window constraint: the masked value spans
    2*value_bound + (emax - 1)*step + 1 integers, which must fit in p."""
    if step < 1 or value_bound < 0:
        raise ValueError("bad mask parameters")
    by_budget = E_BUDGET // step
    by_field = (field.p - 1 - 2 * value_bound) // step + 1
    emax = min(by_budget, by_field)
    if emax < 1:
        raise ValueError(
            f"no mask fits: step {step}, value bound {value_bound}, p {field.p}")
    return emax


def gen_additive_mask(shape, r: int, divisor: int, scheme, rng,
                      value_bound: int):
    """Share alpha = e*r*divisor and its companion -e across the scheme.

    Returns (alpha_shares, compensation_shares, e) where the share entries
    are per-party lists and e is the plain tensor (source side only).
    """
    f = scheme.field
    step = r * divisor
    emax = additive_mask_bound(f, step, value_bound)
    e = rng.integers(1, emax + 1, size=shape, dtype=np.int64).astype(object)
    alpha = (e * step) % f.p
    comp = (-e) % f.p
    alpha_shares = scheme.gen(alpha, rng)
    comp_shares = scheme.gen(comp, rng)
    return alpha_shares, comp_shares, e


def multiplicative_mask_bound(field, value_bound: int) -> int:
    if value_bound < 1:
        raise ValueError("value bound must be positive")
    bmax = min(1 << BETA_BITS, field.half // value_bound)
    if bmax < 1:
        raise ValueError(
            f"no positive factor fits: value bound {value_bound}, p {field.p}")
    return bmax


def gen_multiplicative_mask(shape, scheme, rng, pool=None,
                            value_bound: int = (1 << 15) - 1):
    """Share a positive factor beta over `shape` and its inverse over the
    output shape. pool=(kh, kw) makes beta constant per pooling window and
    shrinks the inverse to one entry per window."""
    f = scheme.field
    bmax = multiplicative_mask_bound(f, value_bound)
    shape = tuple(shape)
    if pool is None:
        beta = rng.integers(1, bmax + 1, size=shape, dtype=np.int64).astype(object)
        out = beta
    else:
        kh, kw = pool
        c, h, w = shape
        if h % kh or w % kw:
            raise ValueError(f"pool {kh}x{kw} does not tile {shape}")
        block = rng.integers(1, bmax + 1, size=(c, h // kh, w // kw),
                             dtype=np.int64).astype(object)
        beta = np.repeat(np.repeat(block, kh, axis=1), kw, axis=2)
        out = block
    beta_inv = f.inv(out)
    beta_shares = scheme.gen(beta, rng)
    inv_shares = scheme.gen(beta_inv, rng)
    return beta_shares, inv_shares, beta


def gen_zero_shares(shape, scheme, rng):
    """Fresh sharing of the all-zero tensor (used to re-randomize)."""
    zeros = np.zeros(tuple(shape), dtype=object)
    return scheme.gen(zeros, rng)
