"""Cohomogeneity-one metrics on S^n: curvature, pinching, normalization.

A reduced metric is g = phi(x)^2 dx^2 + psi(x)^2 g_{S^{n-1}} with psi
vanishing at the poles and psi_x/phi -> +/-1 there (smoothness closure).
Curvature is controlled by two sectional profiles,

    K_rad = -psi_ss / psi          (planes containing the radial direction)
    K_orb = (1 - psi_s^2) / psi^2  (planes tangent to the orbits)

with s-derivatives taken in arclength, d/ds = (1/phi) d/dx.  Every other
sectional curvature at a point is a convex combination of the two, so
their grid extremes certify pinching for all 2-planes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import covariant
from .sphere import ReducedSymTensor, get_quadrature, round_volume

__all__ = [
    "ReducedMetric",
    "CurvatureReport",
    "PinchingCertificate",
    "DegenerateMetricError",
    "curvature",
    "pinching_certificate",
    "volume",
    "normalize",
    "neighborhood_certificate",
    "save_metric",
    "load_metric",
]

DEGENERACY_FLOOR = 1e-10
CLOSURE_TOL = 1e-8


class DegenerateMetricError(ValueError):
    """psi lost positivity in the interior (solver fault, not a neck)."""


@dataclass(frozen=True)
class ReducedMetric:
    """Reduced metric profiles on the shared collocation grid."""

    quad: object
    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        phi = np.ascontiguousarray(self.phi, dtype=float)
        psi = np.ascontiguousarray(self.psi, dtype=float)
        if phi.shape != (self.quad.size,) or psi.shape != (self.quad.size,):
            raise ValueError("profile shape does not match the grid")
        if np.any(phi <= 0.0):
            raise DegenerateMetricError("phi must be strictly positive")
        if np.any(psi < DEGENERACY_FLOOR):
            raise DegenerateMetricError(
                f"psi below degeneracy floor {DEGENERACY_FLOOR} in the interior"
            )
        phi.setflags(write=False)
        psi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)

    @property
    def n(self):
        return self.quad.n

    @classmethod
    def round(cls, quad, radius=1.0):
        return cls(quad, radius * np.ones(quad.size), radius * quad.s)

    @classmethod
    def from_frame(cls, quad, rad, orb):
        """Build from sigma-frame components (rad, orb) = (phi^2, (psi/sin)^2)."""
        rad = np.asarray(rad, dtype=float)
        orb = np.asarray(orb, dtype=float)
        if np.any(rad <= 0.0) or np.any(orb <= 0.0):
            raise DegenerateMetricError("frame components must be positive")
        return cls(quad, np.sqrt(rad), quad.s * np.sqrt(orb))

    def to_tensor(self):
        """sigma-frame component tensor of the metric itself."""
        return ReducedSymTensor(
            self.quad, self.phi**2, (self.psi / self.quad.s) ** 2
        )

    def closure_defect(self):
        """Max deviation of psi_x/phi from +1 (x=0) and -1 (x=pi)."""
        q = self.quad
        psis = q.ddx_odd(self.psi) / self.phi
        v0, vpi = q.pole_values_even(psis)
        return max(abs(v0 - 1.0), abs(vpi + 1.0))

    def validate(self, closure_tol=CLOSURE_TOL):
        defect = self.closure_defect()
        if defect > closure_tol:
            raise ValueError(
                f"smoothness closure violated: pole defect {defect:.3e} > {closure_tol}"
            )
        return self

    def reflected(self):
        """Pullback by the isometry x -> pi - x of the reference sphere."""
        return ReducedMetric(self.quad, self.phi[::-1].copy(), self.psi[::-1].copy())


@dataclass(frozen=True)
class CurvatureReport:
    """Sectional profiles, Ricci tensor, scalar curvature and its average."""

    K_rad: np.ndarray
    K_orb: np.ndarray
    ricci: ReducedSymTensor
    scalar: np.ndarray
    scalar_avg: float


@dataclass(frozen=True)
class PinchingCertificate:
    min_sec: float
    max_sec: float
    pinched: bool


def _sectional_profiles(g):
    """Sectional curvature profiles via pole-regular combinations.

    Every division by sin-powers happens exactly in coefficient space,
    so round metrics evaluate to constant curvature at rounding level
    even at the near-pole nodes.
    """
    q = g.quad
    c = q.u
    phi = g.phi
    r = g.psi / q.s
    P = phi**2
    Q = r**2
    phix, phixs, _ = q.even_derivative_pack(phi)
    rx, rxs, rxx = q.even_derivative_pack(r)
    # K_rad = -psi_ss/psi with psi = s r
    K_rad = (1.0 - 2.0 * c * rxs / r - rxx / r) / P + (
        c * phixs + phix * rx / r
    ) / (phi * P)
    # K_orb = (1 - psi_s^2)/psi^2
    dd = q.even_div_s2(P - Q)
    K_orb = (dd + Q - 2.0 * c * r * rxs - rx**2) / (P * Q)
    return K_rad, K_orb


def curvature(g):
    """Curvature report of a reduced metric.

    Arclength derivatives are spectral, so pole values follow from the
    parity of the profiles; the scalar average uses the metric's own
    volume form.
    """
    q = g.quad
    n = q.n
    K_rad, K_orb = _sectional_profiles(g)
    scalar = 2 * (n - 1) * K_rad + (n - 1) * (n - 2) * K_orb
    density = g.phi * (g.psi / q.s) ** (n - 1)
    vol = float(q.w @ density)
    scalar_avg = float(q.w @ (density * scalar)) / vol
    ricci = ReducedSymTensor(
        q,
        (n - 1) * K_rad * g.phi**2,
        (K_rad + (n - 2) * K_orb) * (g.psi / q.s) ** 2,
    )
    return CurvatureReport(K_rad, K_orb, ricci, scalar, scalar_avg)


def pinching_certificate(g, slack=1e-9):
    """Extremes of the sectional curvature over the grid and pole limits.

    ``slack`` absorbs the spectral evaluation noise of the pole limits
    (well below any geometrically meaningful deviation) in the strict
    quarter-pinching test min_sec > 1/4, max_sec <= 1.
    """
    q = g.quad
    K_rad, K_orb = _sectional_profiles(g)
    vals = [K_rad.min(), K_rad.max(), K_orb.min(), K_orb.max()]
    vals.extend(q.pole_values_even(K_rad))
    vals.extend(q.pole_values_even(K_orb))
    min_sec, max_sec = float(min(vals)), float(max(vals))
    return PinchingCertificate(
        min_sec, max_sec, min_sec > 0.25 - slack and max_sec <= 1.0 + slack
    )


def volume(g):
    q = g.quad
    return float(q.w @ (g.phi * (g.psi / q.s) ** (g.n - 1)))


def normalize(g):
    """Rescale to volume omega_n (exponent 2/n on the quadratic form)."""
    vol = volume(g)
    if not vol > 0.0:
        raise DegenerateMetricError("metric has nonpositive volume")
    c = (round_volume(g.n) / vol) ** (1.0 / g.n)  # sqrt of the 2/n power
    return ReducedMetric(g.quad, c * g.phi, c * g.psi)


def _curvature_deviation_channels(g):
    """Channel form of Rm[g] - Rm[round model] in the g-orthonormal frame.

    The deviation has the radial-plane coefficient K_rad - 1 (four channel
    images under the pair symmetries of the curvature tensor) and the
    orbital coefficient K_orb - 1 (two antisymmetric pairings).
    """
    K_rad, K_orb = _sectional_profiles(g)
    kr = K_rad - 1.0
    ko = K_orb - 1.0
    channels = {
        (-1, 3, -1, 1): kr,
        (2, -1, 0, -1): kr,
        (-1, 2, 1, -1): -kr,
        (3, -1, -1, 0): -kr,
        (2, 3, 0, 1): ko,
        (3, 2, 1, 0): -ko,
    }
    return channels


def neighborhood_certificate(g, ghat, thresholds, C, psi_diffeo=None):
    """Membership test for the curvature neighborhood of the round orbit.

    Checks sup_g |nabla_g^j (Rm[g] - Rm[round])| <= thresholds[j] for
    j = 0..len(thresholds)-1, and, when a diffeomorphism profile is
    supplied, that its sup distance to the identity is at most C.
    """
    q = g.quad
    n = q.n
    max_order = len(thresholds) - 1
    if max_order > 2 * n:
        raise ValueError(
            f"derivative order {max_order} above supported maximum 2n = {2 * n}"
        )
    channels = _curvature_deviation_channels(g)
    psi_x = q.ddx_odd(g.psi)
    kappa = (psi_x / g.phi) / g.psi
    ops = covariant.GridOps(q, kappa, 1.0 / g.phi)
    ok = True
    for j, thr in enumerate(thresholds):
        if j > 0:
            channels = covariant.nabla(channels, ops)
        prof = covariant.channel_sup_profile(channels, ops, q)
        sup = float(prof.max())
        if j % 2 == 0:
            p0, ppi = q.pole_values_even(prof**2)
            sup = max(sup, math.sqrt(max(p0, ppi, 0.0)))
        if sup > thr:
            ok = False
            break
    if ok and psi_diffeo is not None:
        ok = psi_diffeo.sup_distance_to_identity() <= C
    return bool(ok)


# ---------------------------------------------------------------------------
# metric file format

def save_metric(g, path):
    payload = {
        "n": g.n,
        "N": g.quad.size,
        "phi": [float(v) for v in g.phi],
        "psi": [float(v) for v in g.psi],
    }
    Path(path).write_text(json.dumps(payload))


def load_metric(path, validate=True):
    payload = json.loads(Path(path).read_text())
    for key in ("n", "N", "phi", "psi"):
        if key not in payload:
            raise ValueError(f"metric file missing key {key!r}")
    quad = get_quadrature(int(payload["n"]), int(payload["N"]))
    g = ReducedMetric(quad, np.array(payload["phi"]), np.array(payload["psi"]))
    if validate:
        g.validate()
    return g
