"""Recovery of the isometry from a numerically round metric to sigma.

In the reduced class the geodesics from a pole are radial, so the
exponential-map construction is one-dimensional: an orthonormal frame at
the pole comes from Gram-Schmidt (a single scale factor, since reduced
metrics are conformal at the poles), and matching radial arclength
produces the axis profile of the isometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffeo import DiffeoProfile, pullback
from .metrics import ReducedMetric, pinching_certificate
from .sphere import sup_norm

__all__ = [
    "IsometryResult",
    "gram_schmidt_frame",
    "build_isometry",
    "continuity_modulus",
]

ROUNDNESS_PRECONDITION = 1e-4


@dataclass(frozen=True)
class IsometryResult:
    """Axis isometry with its defect certificate.

    ``diffeo`` is the profile of phi_g with phi_g^* sigma = g; the
    residual |phi_g^* sigma - g|_inf is always reported.  ``reflected``
    records the orientation branch (the arclength construction fixes the
    increasing one, so it is False for all recovered isometries).
    """

    diffeo: DiffeoProfile
    residual: float
    frame: np.ndarray
    reflected: bool = False


def gram_schmidt_frame(g, basepoint="north"):
    """g-orthonormal frame at a pole from the reference sigma frame.

    Reduced metrics are conformal at the poles (smoothness closure makes
    the orbital and radial scales agree), so Gram-Schmidt rescales the
    whole reference frame by 1/phi(pole); the scale depends continuously
    on g.
    """
    q = g.quad
    phi0, phipi = q.pole_values_even(g.phi)
    if basepoint == "north":
        scale = phi0
    elif basepoint == "south":
        scale = phipi
    else:
        raise ValueError(f"basepoint must be 'north' or 'south', got {basepoint!r}")
    if not scale > 0:
        raise ValueError("metric degenerates at the basepoint")
    return np.full(q.n, 1.0 / scale)


def build_isometry(g, roundness_tol=ROUNDNESS_PRECONDITION):
    """Isometry profile phi_g with phi_g^* sigma = g for round inputs.

    The radial g-arclength from the north pole, rescaled to total length
    pi, is the axis profile of the isometry; for exactly round inputs
    the residual is at rounding level, and for inputs with curvature
    defect d it scales like a multiple of d.
    """
    cert = pinching_certificate(g)
    defect = max(abs(cert.min_sec - 1.0), abs(cert.max_sec - 1.0))
    if defect > roundness_tol:
        raise ValueError(
            f"input is not numerically round: curvature defect {defect:.3e} "
            f"> {roundness_tol}"
        )
    q = g.quad
    a = q.cos_coeffs(g.phi)
    jj = np.arange(1, q.size)
    # antiderivative of the cosine series: a0 x + sum a_j sin(jx)/j
    arclength = a[0] * q.x + q.from_sin(np.append(a[1:] / jj, 0.0)[: q.size])
    total = a[0] * math.pi
    theta = arclength * (math.pi / total)
    prof = DiffeoProfile(q, theta)
    sigma = ReducedMetric.round(q)
    residual = sup_norm(pullback(sigma, prof).to_tensor() - g.to_tensor())
    return IsometryResult(
        diffeo=prof,
        residual=float(residual),
        frame=gram_schmidt_frame(g),
    )


def continuity_modulus(samples, roundness_tol=ROUNDNESS_PRECONDITION):
    """Discrete Lipschitz estimate of g -> phi_g over a sample path.

    Max over consecutive pairs of |phi_i - phi_{i+1}|_inf divided by
    |g_i - g_{i+1}|_inf; coincident samples contribute zero.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples for a modulus")
    isos = [build_isometry(g, roundness_tol) for g in samples]
    modulus = 0.0
    for g1, g2, i1, i2 in zip(samples, samples[1:], isos, isos[1:]):
        dg = sup_norm(g1.to_tensor() - g2.to_tensor())
        dphi = float(np.abs(i1.diffeo.theta - i2.diffeo.theta).max())
        if dg == 0.0:
            continue
        modulus = max(modulus, dphi / dg)
    return modulus
