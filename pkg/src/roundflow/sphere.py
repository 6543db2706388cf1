"""Quadrature, harmonics, inner products and norms on the round sphere.

Everything in the reduced (axisymmetric) class is a profile over the
polar angle x in [0, pi].  The round metric sigma is phi = 1, psi = sin.
Integration against d(mu)[sigma] uses Gauss-Jacobi nodes for the weight
sin^{n-1}(x); smooth even profiles are trigonometric series in cos(jx),
smooth odd profiles are series in sin(jx), so spectral differentiation
is exact on resolved data and respects parity at the poles.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import roots_jacobi

__all__ = [
    "round_volume",
    "Quadrature",
    "HarmonicTable",
    "ReducedSymTensor",
    "get_quadrature",
    "l2_inner",
    "sup_norm",
    "sobolev_norm",
]

DEFAULT_RESOLUTION = 128


def round_volume(n):
    """Volume of the canonical unit round sphere S^n.

    Returns 2 pi^{(n+1)/2} / Gamma((n+1)/2).
    """
    if n < 1:
        raise ValueError(f"sphere dimension must be >= 1, got {n}")
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


class Quadrature:
    """Collocation grid and transforms for axisymmetric fields on S^n.

    Nodes are the Gauss-Jacobi points for the weight sin^{n-1}(x) on
    [0, pi] (interior only; pole values are recovered spectrally), and
    the weights implement integration against d(mu)[sigma], i.e.
    ``integrate(ones) == round_volume(n)`` to machine precision.

    The object is immutable after construction and safe to share
    between threads.
    """

    def __init__(self, n, size=DEFAULT_RESOLUTION):
        if n < 3:
            raise ValueError(f"reduced class needs n >= 3, got n={n}")
        if size < 8:
            raise ValueError(f"resolution too small: {size}")
        self.n = int(n)
        self.size = int(size)
        N = self.size
        a = (n - 2) / 2.0
        u, w = roots_jacobi(N, a, a)
        # increasing x = arccos(u) means reversing the node order
        self.x = np.arccos(u)[::-1].copy()
        self.u = np.cos(self.x)
        self.s = np.sin(self.x)
        self.w = w[::-1].copy() * round_volume(n - 1)
        self.total = float(self.w.sum())

        j = np.arange(N)
        self._Vcos = np.cos(np.outer(self.x, j))
        self._Vsin = np.sin(np.outer(self.x, np.arange(1, N + 1)))
        self._lu_cos = lu_factor(self._Vcos)
        self._lu_sin = lu_factor(self._Vsin)
        # d/dx sin(jx) = j cos(jx) reaches cos(Nx), one past the even basis
        self._Vcos_ext = np.cos(np.outer(self.x, np.arange(1, N + 1)))

        lam = (n - 1) / 2.0
        self.lam = lam
        self._geg = _gegenbauer_table(lam, N, self.u)
        self._geg_norm = (self._geg**2 * self.w).sum(axis=1)
        nd = N - 2
        self._tf_gegen = _gegenbauer_table(lam + 2.0, nd, self.u)
        self._tf_basis = self.s**2 * self._tf_gegen
        self._tf_norm = (self._tf_basis**2 * self.w).sum(axis=1)
        self.n_trace_modes = N
        self.n_tracefree_modes = nd
        # Chebyshev U table for exact division of odd series by sin(x)
        self._cheb_u = _gegenbauer_table(1.0, N, self.u)

        for arr in (self.x, self.u, self.s, self.w, self._geg, self._tf_basis):
            arr.setflags(write=False)

    # -- scalar integration -------------------------------------------------

    def integrate(self, f):
        """Integral of a profile against d(mu)[sigma]."""
        return float(self.w @ f)

    def scalar_inner(self, f, g):
        return float(self.w @ (f * g))

    # -- trigonometric transforms -------------------------------------------

    def cos_coeffs(self, f):
        """Coefficients a_j of an even profile f = sum a_j cos(jx)."""
        return lu_solve(self._lu_cos, np.asarray(f, dtype=float))

    def from_cos(self, a):
        return self._Vcos @ a

    def sin_coeffs(self, g):
        """Coefficients b_j of an odd profile g = sum_{j>=1} b_j sin(jx)."""
        return lu_solve(self._lu_sin, np.asarray(g, dtype=float))

    def from_sin(self, b):
        return self._Vsin @ b

    def eval_even(self, a, xq):
        """Evaluate an even series at arbitrary angles."""
        xq = np.asarray(xq, dtype=float)
        return np.cos(np.outer(xq, np.arange(len(a)))) @ a

    def eval_odd(self, b, xq):
        xq = np.asarray(xq, dtype=float)
        return np.sin(np.outer(xq, np.arange(1, len(b) + 1))) @ b

    # -- differentiation ----------------------------------------------------

    def ddx_even(self, f):
        """x-derivative of an even profile (result is odd)."""
        a = self.cos_coeffs(f)
        jj = np.arange(1, self.size)
        return self._Vsin[:, : self.size - 1] @ (-(jj * a[1:]))

    def ddx_odd(self, g):
        """x-derivative of an odd profile (result is even)."""
        b = self.sin_coeffs(g)
        jj = np.arange(1, self.size + 1)
        return self._Vcos_ext @ (jj * b)

    # -- exact singular divisions ---------------------------------------------

    def odd_div_s(self, g):
        """g(x)/sin(x) for odd g, exactly: sin(jx)/sin(x) = U_{j-1}(cos x)."""
        b = self.sin_coeffs(g)
        return b @ self._cheb_u

    def even_div_s2(self, f):
        """f(x)/sin^2(x) for even f vanishing at both poles.

        Projects f on the sin^2-prefactored Gegenbauer basis and strips
        the prefactor in coefficient space; any component of f not
        divisible by sin^2 (pole noise) is filtered out.
        """
        return self.tracefree_coeffs(f) @ self._tf_gegen

    def even_derivative_pack(self, f):
        """(f_x, f_x/sin, f_xx) of an even profile from one transform."""
        a = self.cos_coeffs(f)
        N = self.size
        jj = np.arange(1, N)
        b = -(jj * a[1:])
        fx = self._Vsin[:, : N - 1] @ b
        fxs = b @ self._cheb_u[: N - 1]
        fxx = self._Vcos @ np.concatenate([[0.0], jj * b])
        return fx, fxs, fxx

    def odd_pack(self, g):
        """(g/sin, g_x) of an odd profile from one transform."""
        b = self.sin_coeffs(g)
        jj = np.arange(1, self.size + 1)
        return b @ self._cheb_u, self._Vcos_ext @ (jj * b)

    # -- pole extension -----------------------------------------------------

    def pole_values_even(self, f):
        """Spectral limits (f(0), f(pi)) of an even profile."""
        a = self.cos_coeffs(f)
        signs = 1.0 - 2.0 * (np.arange(self.size) % 2)
        return float(a.sum()), float(a @ signs)

    # -- harmonic / tracefree mode transforms --------------------------------

    def trace_mode(self, j):
        """Axis scalar harmonic of level j (Gegenbauer profile on the grid)."""
        return self._geg[j]

    def trace_mode_norm2(self, j):
        return float(self._geg_norm[j])

    def tracefree_mode(self, m):
        """Tracefree profile basis element sin^2(x) * C_m^{lam+2}(cos x)."""
        return self._tf_basis[m]

    def tracefree_mode_norm2(self, m):
        return float(self._tf_norm[m])

    def trace_coeffs(self, H):
        """Expand a scalar profile in the axis harmonic basis."""
        return (self._geg * (self.w * H)).sum(axis=1) / self._geg_norm

    def trace_from_coeffs(self, c):
        return c @ self._geg

    def tracefree_coeffs(self, D):
        """Expand a tracefree profile in the sin^2 * Gegenbauer basis."""
        return (self._tf_basis * (self.w * D)).sum(axis=1) / self._tf_norm

    def tracefree_from_coeffs(self, d):
        return d @ self._tf_basis


def _gegenbauer_table(lam, nmodes, u):
    """Rows j = 0..nmodes-1 of C_j^lam evaluated at the points u."""
    T = np.zeros((max(nmodes, 1), len(u)))
    T[0] = 1.0
    if nmodes > 1:
        T[1] = 2.0 * lam * u
    for j in range(1, nmodes - 1):
        T[j + 1] = (2.0 * (j + lam) * u * T[j] - (j + 2.0 * lam - 1.0) * T[j - 1]) / (j + 1.0)
    return T


@functools.lru_cache(maxsize=32)
def get_quadrature(n, size=DEFAULT_RESOLUTION):
    """Shared immutable quadrature for (n, size)."""
    return Quadrature(n, size)


@dataclass(frozen=True)
class HarmonicTable:
    """Axis harmonics and the scalar Laplacian spectrum on S^n.

    The only ambient coordinate function surviving in the reduced class
    is the axis one, x^{n+1}|_{S^n} = cos(x); the scalar spectrum of
    -Laplacian is j(n+j-1).
    """

    n: int
    quad: Quadrature

    @property
    def axis_profile(self):
        return self.quad.u

    def eigenvalue(self, j):
        return float(j * (self.n + j - 1))

    def mode_profile(self, j):
        return self.quad.trace_mode(j)


@dataclass(frozen=True)
class ReducedSymTensor:
    """Symmetric 2-tensor in the reduced class, sigma-orthonormal frame.

    ``rad`` is the h(e_x, e_x) profile and ``orb`` the common profile of
    the n-1 orbital diagonal components; mixed components vanish in the
    reduced class.  The round metric itself is rad = orb = 1.
    """

    quad: Quadrature
    rad: np.ndarray
    orb: np.ndarray

    def __post_init__(self):
        rad = np.ascontiguousarray(self.rad, dtype=float)
        orb = np.ascontiguousarray(self.orb, dtype=float)
        if rad.shape != (self.quad.size,) or orb.shape != (self.quad.size,):
            raise ValueError(
                f"profile shape mismatch: expected ({self.quad.size},), "
                f"got {rad.shape} and {orb.shape}"
            )
        rad.setflags(write=False)
        orb.setflags(write=False)
        object.__setattr__(self, "rad", rad)
        object.__setattr__(self, "orb", orb)

    @property
    def n(self):
        return self.quad.n

    def trace_profile(self):
        """sigma-trace H = rad + (n-1) orb."""
        return self.rad + (self.n - 1) * self.orb

    def tracefree_profile(self):
        """Scalar profile D = rad - orb of the tracefree part."""
        return self.rad - self.orb

    def modes(self):
        """(trace coefficients, tracefree coefficients) of the tensor."""
        return (
            self.quad.trace_coeffs(self.trace_profile()),
            self.quad.tracefree_coeffs(self.tracefree_profile()),
        )

    @classmethod
    def from_modes(cls, quad, trace_c, tracefree_c):
        H = quad.trace_from_coeffs(trace_c)
        D = quad.tracefree_from_coeffs(tracefree_c)
        n = quad.n
        return cls(quad, H / n + (n - 1) * D / n, H / n - D / n)

    @classmethod
    def zeros(cls, quad):
        return cls(quad, np.zeros(quad.size), np.zeros(quad.size))

    @classmethod
    def round_metric(cls, quad):
        return cls(quad, np.ones(quad.size), np.ones(quad.size))

    def __add__(self, other):
        _check_same_grid(self, other)
        return ReducedSymTensor(self.quad, self.rad + other.rad, self.orb + other.orb)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return ReducedSymTensor(self.quad, self.rad - other.rad, self.orb - other.orb)

    def __rmul__(self, c):
        return ReducedSymTensor(self.quad, c * self.rad, c * self.orb)

    def scaled_by_profile(self, f):
        return ReducedSymTensor(self.quad, f * self.rad, f * self.orb)


def _check_same_grid(h1, h2):
    if h1.quad is not h2.quad and (
        h1.quad.n != h2.quad.n or h1.quad.size != h2.quad.size
    ):
        raise ValueError(
            f"grid mismatch: (n={h1.quad.n}, N={h1.quad.size}) vs "
            f"(n={h2.quad.n}, N={h2.quad.size})"
        )


def l2_inner(h1, h2, quad=None):
    """L^2(sigma) inner product of two reduced symmetric 2-tensors.

    In frame components this is the quadrature sum of
    rad1*rad2 + (n-1) orb1*orb2 against d(mu)[sigma].
    """
    _check_same_grid(h1, h2)
    q = quad if quad is not None else h1.quad
    n = q.n
    return float(q.w @ (h1.rad * h2.rad + (n - 1) * h1.orb * h2.orb))


def l2_norm(h):
    return math.sqrt(max(l2_inner(h, h), 0.0))


def _pointwise_norm(h):
    n = h.quad.n
    return np.sqrt(h.rad**2 + (n - 1) * h.orb**2)


def sup_norm(h):
    """Sup over S^n of the pointwise sigma-frame norm.

    Pole values are included through the spectral even extension; for
    the identity tensor this gives sqrt(n) exactly.
    """
    q = h.quad
    n = q.n
    interior = float(_pointwise_norm(h).max())
    r0, rpi = q.pole_values_even(h.rad)
    o0, opi = q.pole_values_even(h.orb)
    pole = math.sqrt(max(r0**2 + (n - 1) * o0**2, rpi**2 + (n - 1) * opi**2))
    return max(interior, pole)


def sobolev_norm(h, m, quad=None):
    """Sum over 0 <= k <= m of the L^2 norms of iterated sigma-covariant
    derivatives of the tensor h.

    The derivative order is capped at 2n; higher orders raise.  Norms are
    evaluated mode-by-mode: the trace and tracefree harmonic families are
    mutually orthogonal under every iterated gradient (the metric is
    parallel and trace commutes with the covariant derivative), so the
    norm reduces to scalar iterated-gradient weights computed exactly by
    :mod:`roundflow.covariant`.
    """
    from . import covariant

    q = quad if quad is not None else h.quad
    n = q.n
    if m < 0:
        raise ValueError("derivative order must be nonnegative")
    if m > 2 * n:
        raise ValueError(
            f"derivative order {m} above supported maximum 2n = {2 * n}"
        )
    hc, dc = h.modes()
    lam4 = (2.0 * q.lam) * (2.0 * q.lam + 2.0)  # Hess(C_j) tracefree prefactor 4*lam*(lam+1)
    total = 0.0
    # modes below relative 1e-15 contribute quadratically nothing; skipping
    # them keeps the q-table workload proportional to the resolved content
    scale = max(np.abs(hc).max() if len(hc) else 0.0,
                np.abs(dc).max() if len(dc) else 0.0, 1e-300)
    tol = 1e-15
    for k in range(m + 1):
        acc = 0.0
        for j, c in enumerate(hc):
            if abs(c) <= tol * scale:
                continue
            qk = covariant.scalar_gradient_norms(q, j, k)[k]
            acc += (c / n) ** 2 * n * qk * q.trace_mode_norm2(j)
        for mm, c in enumerate(dc):
            if abs(c) <= tol * scale:
                continue
            j = mm + 2
            lamj = j * (n + j - 1)
            qtab = covariant.scalar_gradient_norms(q, j, k + 2)
            wgt = (qtab[k + 2] - lamj**2 * qtab[k] / n) / lam4**2
            acc += c**2 * wgt * q.trace_mode_norm2(j)
        total += math.sqrt(max(acc, 0.0))
    return total
