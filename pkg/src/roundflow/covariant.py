"""Iterated covariant derivatives of axisymmetric tensors on S^n.

An O(n-1)-invariant tensor field along a meridian is a sum of "channels":
products of radial coframe factors and Kronecker pairings of orbital
slots, each multiplied by a coefficient profile of x.  The covariant
derivative acts channel-by-channel with three rules (derived from the
warped-product connection; kappa denotes the frame rotation coefficient,
cot(x) for the round metric):

1. a new radial slot differentiates the coefficient,
2. a new orbital slot pairs with an existing radial slot p with weight
   +kappa,
3. a new orbital slot pairs with a partner of an existing pair (p, q),
   turning p (or q) radial, with weight -kappa.

Channel inner products contract pairings against pairings; the Gram
factor between two channels with the same radial slots is
(n-1)^{#cycles} over the union of their matchings.

Two value algebras implement the same rules: an exact one storing
coefficients as sin-power times a Chebyshev polynomial in cos(x) (used
for the round metric, where everything is closed under the rules and
free of pole cancellation), and a grid algebra for derivatives in the
frame of a general reduced metric (used at low order only).
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import chebyshev as C

__all__ = [
    "nabla",
    "PolyOps",
    "GridOps",
    "channel_l2_norm2",
    "channel_sup_profile",
    "scalar_gradient_norms",
    "scalar_gradient_norm_closed",
]

_TRIM = 1e-14


# ---------------------------------------------------------------------------
# channel keys

def _radial_set(key):
    return tuple(i for i, m in enumerate(key) if m < 0)


def _pairs(key):
    return tuple((i, m) for i, m in enumerate(key) if m > i)


def _shift(key):
    return tuple(-1 if m < 0 else m + 1 for m in key)


def _with_pair(key, i, j):
    k = list(key)
    k[i] = j
    k[j] = i
    return tuple(k)


def _with_radial(key, i):
    k = list(key)
    k[i] = -1
    return tuple(k)


def _union_cycles_exact(key_a, key_b, orbital):
    """Cycle count via the permutation composed of the two involutions."""
    nxt = {}
    for i in orbital:
        nxt[i] = key_b[key_a[i]]
    seen = set()
    ncyc = 0
    for i in orbital:
        if i in seen:
            continue
        ncyc += 1
        j = i
        while j not in seen:
            seen.add(j)
            j = nxt[j]
    # components of the union graph = cycles of the composition / 2,
    # except that fixed points pair up too: each union component of size
    # 2L yields exactly two composition cycles of length L.
    return ncyc // 2


# ---------------------------------------------------------------------------
# exact value algebra: sin(x)^p * P(cos x), P in Chebyshev coefficients

_ONE_MINUS_U2 = np.array([0.5, 0.0, -0.5])


def _trim(c):
    c = C.chebtrim(c, tol=_TRIM * max(1.0, np.abs(c).max() if len(c) else 1.0))
    return c if len(c) else np.zeros(1)


class PolyOps:
    """Exact channel-value algebra for the round sphere frame."""

    def ddx(self, val):
        p, P = val
        dP = C.chebder(P) if len(P) > 1 else np.zeros(1)
        if p == 0:
            return (1, -dP)
        new = C.chebadd(p * C.chebmulx(P), -C.chebmul(_ONE_MINUS_U2, dP))
        return (p - 1, new)

    def kappa_mul(self, val):
        # may leave a transiently negative sin power; contributions to one
        # channel cancel the singular part, so canonicalization happens only
        # after the accumulation in nabla()
        p, P = val
        return (p - 1, C.chebmulx(P))

    def add(self, v1, v2):
        (p1, P1), (p2, P2) = v1, v2
        if p1 == p2:
            return (p1, C.chebadd(P1, P2))
        if p1 > p2:
            (p1, P1), (p2, P2) = (p2, P2), (p1, P1)
        # p2 > p1: multiply P2 by (1-u^2)^{(p2-p1)/2}; powers differ by 2
        extra = (p2 - p1) // 2
        if (p2 - p1) % 2:
            raise ValueError("sin-power parity mismatch in channel addition")
        for _ in range(extra):
            P2 = C.chebmul(_ONE_MINUS_U2, P2)
        return (p1, C.chebadd(P1, P2))

    def scale(self, val, c):
        p, P = val
        return (p, c * P)

    def canonical(self, val):
        p, P = val
        while p < 0:
            quo, rem = C.chebdiv(P, _ONE_MINUS_U2)
            scale = max(np.abs(P).max(), 1e-300)
            if np.abs(rem).max() > 1e-9 * scale:
                raise ArithmeticError(
                    "channel coefficient not divisible by sin^2; "
                    f"relative remainder {np.abs(rem).max()/scale:.2e}"
                )
            P = quo if len(quo) else np.zeros(1)
            p += 2
        return (p, _trim(P))

    def evaluate(self, val, quad):
        p, P = val
        return quad.s**p * C.chebval(quad.u, P)


class GridOps:
    """Grid channel-value algebra for the orthonormal frame of a reduced
    metric; values are profiles on the quadrature nodes.

    Parity alternates with valence, so the caller supplies the parity of
    the current level; ``kappa`` is psi_s/psi and ``dds`` applies the
    arclength derivative (1/phi) d/dx.
    """

    def __init__(self, quad, kappa, inv_phi):
        self.quad = quad
        self.kappa = kappa
        self.inv_phi = inv_phi
        self.parity_even = True  # parity of the current valence level

    def ddx(self, val):
        q = self.quad
        d = q.ddx_even(val) if self.parity_even else q.ddx_odd(val)
        return self.inv_phi * d

    def kappa_mul(self, val):
        return self.kappa * val

    def add(self, v1, v2):
        return v1 + v2

    def scale(self, val, c):
        return c * val

    def evaluate(self, val, quad):
        return val


def nabla(channels, ops):
    """One covariant derivative of a channel dictionary.

    The direction slot becomes position 0; existing positions shift up.
    """
    out = {}

    def acc(key, val):
        if key in out:
            out[key] = ops.add(out[key], val)
        else:
            out[key] = val

    for key, val in channels.items():
        base = (-1,) + _shift(key)
        v = len(key)
        # rule 1: radial direction differentiates the coefficient
        acc(base, ops.ddx(val))
        kval = ops.kappa_mul(val) if v else None
        # rule 2: orbital direction pairs with each radial slot
        for p in range(v):
            if key[p] < 0:
                acc(_with_pair(base, 0, p + 1), kval)
        # rule 3: orbital direction breaks each pair
        for (p, qq) in _pairs(key):
            acc(_with_radial(_with_pair(base, 0, qq + 1), p + 1), ops.scale(kval, -1.0))
            acc(_with_radial(_with_pair(base, 0, p + 1), qq + 1), ops.scale(kval, -1.0))
    if isinstance(ops, GridOps):
        ops.parity_even = not ops.parity_even
        return out
    return {k: ops.canonical(v) for k, v in out.items()}


def _grouped_values(channels, ops, quad):
    groups = {}
    for key, val in channels.items():
        groups.setdefault(_radial_set(key), []).append(
            (key, ops.evaluate(val, quad))
        )
    return groups


def _gram_exponents(keys, orbital):
    m = len(keys)
    expo = np.zeros((m, m), dtype=np.int64)
    for a in range(m):
        for b in range(a, m):
            c = _union_cycles_exact(keys[a], keys[b], orbital)
            expo[a, b] = expo[b, a] = c
    return expo


def channel_l2_norm2(channels, ops, quad, weight=None):
    """Squared L^2 norm of a channel tensor; ``weight`` overrides the
    round measure profile (defaults to the sigma quadrature weights)."""
    w = quad.w if weight is None else weight
    n1 = quad.n - 1
    total = 0.0
    for rset, items in _grouped_values(channels, ops, quad).items():
        keys = [k for k, _ in items]
        V = np.array([v for _, v in items])
        orbital = [i for i in range(len(keys[0])) if i not in rset]
        gram = np.power(float(n1), _gram_exponents(keys, orbital))
        I = (V * w) @ V.T
        total += float((gram * I).sum())
    return total


def channel_sup_profile(channels, ops, quad):
    """Pointwise frame norm of a channel tensor on the grid."""
    n1 = quad.n - 1
    out = np.zeros(quad.size)
    for rset, items in _grouped_values(channels, ops, quad).items():
        keys = [k for k, _ in items]
        V = np.array([v for _, v in items])
        orbital = [i for i in range(len(keys[0])) if i not in rset]
        gram = np.power(float(n1), _gram_exponents(keys, orbital))
        out += np.einsum("ax,ab,bx->x", V, gram, V)
    return np.sqrt(np.maximum(out, 0.0))


# ---------------------------------------------------------------------------
# scalar iterated-gradient tables

_QCACHE = {}


def _cheb_gegenbauer(j, lam):
    """Chebyshev coefficients of the Gegenbauer polynomial C_j^lam."""
    c_prev = np.array([1.0])
    if j == 0:
        return c_prev
    c_cur = np.array([0.0, 2.0 * lam])
    for k in range(1, j):
        c_next = C.chebadd(
            2.0 * (k + lam) / (k + 1.0) * C.chebmulx(c_cur),
            -(k + 2.0 * lam - 1.0) / (k + 1.0) * c_prev,
        )
        c_prev, c_cur = c_cur, c_next
    return c_cur


def scalar_gradient_norms(quad, j, kmax):
    """q_k(j) = |grad^k f_j|_2^2 / |f_j|_2^2 for the level-j axis harmonic,
    k = 0..kmax, computed with the exact channel engine."""
    key = (quad.n, j)
    cached = _QCACHE.get(key)
    if cached is not None and len(cached) > kmax:
        return cached[: kmax + 1]
    ops = PolyOps()
    channels = {(): (0, _cheb_gegenbauer(j, quad.lam))}
    norm0 = channel_l2_norm2(channels, ops, quad)
    qs = [1.0]
    for _ in range(kmax):
        channels = nabla(channels, ops)
        qs.append(channel_l2_norm2(channels, ops, quad) / norm0)
    _QCACHE[key] = qs
    return qs


def scalar_gradient_norm_closed(n, j, k):
    """Closed forms of q_k(j) for k <= 3 (test oracle)."""
    lam = float(j * (n + j - 1))
    if k == 0:
        return 1.0
    if k == 1:
        return lam
    if k == 2:
        return lam * (lam - (n - 1))
    if k == 3:
        return (lam - 2 * n) * lam * (lam - (n - 1)) + 2 * lam**2
    raise ValueError("closed form available only for k <= 3")
