"""Axis-symmetric diffeomorphisms of S^n and pullbacks of reduced metrics.

An axis diffeomorphism is a monotone reparametrization theta of the polar
angle with fixed endpoints; theta(x) - x is an odd profile, so it carries
an exact sine-series representation used for off-grid evaluation and
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import ReducedMetric
from .sphere import ReducedSymTensor

__all__ = ["DiffeoProfile", "pullback", "pullback_tensor", "flow_autonomous"]


class DiffeomorphismError(ValueError):
    """Monotonicity or endpoint failure of an axis reparametrization."""


@dataclass(frozen=True)
class DiffeoProfile:
    """Monotone axis reparametrization theta: [0, pi] -> [0, pi]."""

    quad: object
    theta: np.ndarray
    _sin_coeffs: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=float)
        if theta.shape != (self.quad.size,):
            raise ValueError("theta shape does not match the grid")
        coeffs = self.quad.sin_coeffs(theta - self.quad.x)
        theta.setflags(write=False)
        coeffs.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "_sin_coeffs", coeffs)
        dmin = self.derivative(self.quad.x).min()
        if not dmin > 0.0:
            raise DiffeomorphismError(
                f"reparametrization not strictly monotone (min slope {dmin:.3e})"
            )

    @classmethod
    def identity(cls, quad):
        return cls(quad, quad.x.copy())

    @classmethod
    def from_sin_series(cls, quad, coeffs):
        b = np.zeros(quad.size)
        b[: len(coeffs)] = coeffs
        return cls(quad, quad.x + quad.from_sin(b))

    def __call__(self, xq):
        xq = np.asarray(xq, dtype=float)
        return xq + self.quad.eval_odd(self._sin_coeffs, xq)

    def derivative(self, xq):
        xq = np.asarray(xq, dtype=float)
        jj = np.arange(1, len(self._sin_coeffs) + 1)
        return 1.0 + np.cos(np.outer(xq, jj)) @ (jj * self._sin_coeffs)

    def sup_distance_to_identity(self):
        return float(np.abs(self.theta - self.quad.x).max())

    def compose(self, other):
        """Profile of self after other: x -> self(other(x))."""
        return DiffeoProfile(self.quad, self(other.theta))

    def inverse(self, tol=1e-13, max_iter=60):
        """Numerical inverse via safeguarded Newton on each node."""
        q = self.quad
        y = q.x.copy()
        for _ in range(max_iter):
            r = self(y) - q.x
            step = r / self.derivative(y)
            y = np.clip(y - step, 0.0, np.pi)
            if np.abs(step).max() < tol:
                break
        return DiffeoProfile(q, y)


def pullback(g, d):
    """Pullback of a reduced metric by an axis diffeomorphism.

    (theta^* g)(x) = phi(theta)^2 theta'(x)^2 dx^2 + psi(theta)^2 g_{S^{n-1}},
    resampled on the standard grid; the volume is invariant.
    """
    q = g.quad
    if d.quad.size != q.size or d.quad.n != q.n:
        raise ValueError("diffeomorphism and metric live on different grids")
    th = d.theta
    dth = d.derivative(q.x)
    if np.any(dth <= 0.0):
        raise DiffeomorphismError("pullback by a non-monotone profile")
    phi_c = q.cos_coeffs(g.phi)
    psi_c = q.sin_coeffs(g.psi)
    phi_new = q.eval_even(phi_c, th) * dth
    psi_new = q.eval_odd(psi_c, th)
    return ReducedMetric(q, phi_new, psi_new)


def pullback_tensor(h, d):
    """Pullback of a reduced symmetric 2-tensor by an axis diffeomorphism.

    In sigma-frame components: rad -> rad(theta) theta'^2 and
    orb -> orb(theta) sin(theta)^2 / sin(x)^2.
    """
    q = h.quad
    th = d.theta
    dth = d.derivative(q.x)
    rad_c = q.cos_coeffs(h.rad)
    orb_c = q.cos_coeffs(h.orb)
    rad_new = q.eval_even(rad_c, th) * dth**2
    orb_new = q.eval_even(orb_c, th) * (np.sin(th) / q.s) ** 2
    return ReducedSymTensor(q, rad_new, orb_new)


def flow_autonomous(quad, w, t, n_steps=None):
    """Time-t flow of the autonomous axis field w(x) d/dx as a profile.

    Classical RK4 on d(theta)/dtau = w(theta) started from the identity;
    used as the frozen-field reference for the flow-coupled
    diffeomorphism ODE.
    """
    if n_steps is None:
        n_steps = max(64, int(64 * abs(t)))
    wc = quad.sin_coeffs(np.asarray(w, dtype=float))

    def rhs(y):
        return quad.eval_odd(wc, np.clip(y, 0.0, np.pi))

    y = quad.x.copy()
    dt = t / n_steps
    for _ in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return DiffeoProfile(quad, y)
