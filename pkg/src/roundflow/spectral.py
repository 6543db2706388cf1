"""Linearized flow operator at the round metric and mode decompositions.

At a round background the linearization of the gauge-fixed flow is

    L h = Delta_2 h - 2 h0 + 2 (n-1)/n (H - Hbar) ghat,

with H the trace, h0 the tracefree part and Hbar the average of H.  On
the reduced class L splits into a scalar operator on the trace,
L_0 = Delta_0 + 2(n-1)(. - avg), and the strictly stable
L_2 = Delta_2 - 2 on tracefree parts.  The spectrum is n-2 on the axis
conformal mode, 0 on multiples of the metric, and <= -4 on everything
else; these are the facts the discrete eigensolve verifies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .diffeo import DiffeoProfile, pullback_tensor
from .metrics import ReducedMetric, pinching_certificate, volume
from .sphere import ReducedSymTensor, l2_inner, round_volume, sup_norm

__all__ = [
    "SpectralDecomp",
    "OperatorSpectrum",
    "apply_L",
    "split_L0_L2",
    "spectrum",
    "decompose",
    "reconstruct",
    "redundancy_residual",
    "export_spectrum_csv",
    "trace_eigenvalue",
]

ROUND_TOL = 1e-8


class NonRoundBackgroundError(ValueError):
    """The constant-coefficient form of L holds only at round backgrounds."""


def trace_eigenvalue(n, j):
    """Eigenvalue of L on the level-j trace harmonic: -j(n+j-1) + 2(n-1)."""
    if j == 0:
        return 0.0
    return float(-j * (n + j - 1) + 2 * (n - 1))


def _require_round(ghat):
    cert = pinching_certificate(ghat)
    dev = max(abs(cert.min_sec - 1.0), abs(cert.max_sec - 1.0))
    if dev > ROUND_TOL:
        raise NonRoundBackgroundError(
            f"background curvature deviates from 1 by {dev:.3e} > {ROUND_TOL}"
        )


def _delta2(h):
    """Rough Laplacian of a reduced tensor at sigma (frame formula)."""
    q = h.quad
    n = q.n
    cot = q.u / q.s
    hr, ho = h.rad, h.orb
    hr1 = q.ddx_even(hr)
    ho1 = q.ddx_even(ho)
    hr2 = q.ddx_odd(hr1)
    ho2 = q.ddx_odd(ho1)
    coupling = cot**2 * (hr - ho)
    rad = hr2 + (n - 1) * cot * hr1 - 2 * (n - 1) * coupling
    orb = ho2 + (n - 1) * cot * ho1 + 2 * coupling
    return ReducedSymTensor(q, rad, orb)


def _apply_L_sigma(h):
    q = h.quad
    n = q.n
    lap = _delta2(h)
    H = h.trace_profile()
    Hbar = q.integrate(H) / q.total
    D = h.tracefree_profile()
    h0_rad = (n - 1) / n * D
    h0_orb = -D / n
    coef = 2.0 * (n - 1) / n * (H - Hbar)
    return ReducedSymTensor(
        q, lap.rad - 2 * h0_rad + coef, lap.orb - 2 * h0_orb + coef
    )


def _sigma_gauge_or_none(ghat):
    """Axis isometry rho with rho^* sigma = ghat, or None when ghat is
    already sigma to machine precision."""
    q = ghat.quad
    dev = max(np.abs(ghat.phi - 1.0).max(), np.abs(ghat.psi - q.s).max())
    if dev <= 1e-12:
        return None
    from .isometry import build_isometry

    return build_isometry(ghat).diffeo


def apply_L(h, ghat):
    """Linearized operator L at a round background.

    For backgrounds in the sigma gauge this evaluates the frame formula
    directly; for other round backgrounds the operator is conjugated by
    the axis isometry to sigma.  Non-round backgrounds are rejected.
    """
    _require_round(ghat)
    rho = _sigma_gauge_or_none(ghat)
    if rho is None:
        return _apply_L_sigma(h)
    hdown = pullback_tensor(h, rho.inverse())
    return pullback_tensor(_apply_L_sigma(hdown), rho)


def split_L0_L2(h, ghat):
    """Trace/tracefree split of L: images (1/n) L_0 H ghat and L_2 h0.

    The two images sum to apply_L(h, ghat).
    """
    _require_round(ghat)

    def _split(hh):
        q = hh.quad
        n = q.n
        cot = q.u / q.s
        H = hh.trace_profile()
        Hbar = q.integrate(H) / q.total
        H1 = q.ddx_even(H)
        lap0 = q.ddx_odd(H1) + (n - 1) * cot * H1
        L0H = lap0 + 2.0 * (n - 1) * (H - Hbar)
        trace_img = ReducedSymTensor(q, L0H / n, L0H / n)
        D = hh.tracefree_profile()
        h0 = ReducedSymTensor(q, (n - 1) / n * D, -D / n)
        tracefree_img = _delta2(h0) - 2.0 * h0
        return trace_img, tracefree_img

    rho = _sigma_gauge_or_none(ghat)
    if rho is None:
        return _split(h)
    rinv = rho.inverse()
    hdown = pullback_tensor(h, rinv)
    t, tf = _split(hdown)
    return pullback_tensor(t, rho), pullback_tensor(tf, rho)


@dataclass(frozen=True)
class OperatorSpectrum:
    eigenvalues: np.ndarray
    eigenmodes: list
    residuals: np.ndarray
    mode_classes: list


def _operator_matrix(quad):
    """Dense matrix of L on stacked (rad, orb) grid profiles."""
    N = quad.size
    M = np.zeros((2 * N, 2 * N))
    for col in range(2 * N):
        e = np.zeros(2 * N)
        e[col] = 1.0
        h = ReducedSymTensor(quad, e[:N], e[N:])
        img = _apply_L_sigma(h)
        M[:N, col] = img.rad
        M[N:, col] = img.orb
    return M


def spectrum(ghat, k):
    """Largest k eigenvalues of the discretized L with eigenmode residuals.

    The discrete operator is symmetrized in the quadrature-weighted inner
    product, so eigenvalues are real by construction; residuals are
    measured on the unsymmetrized operator.
    """
    if k < 3:
        raise ValueError("need k >= 3 leading eigenvalues")
    _require_round(ghat)
    q = ghat.quad
    n, N = q.n, q.size
    M = _operator_matrix(q)
    wvec = np.concatenate([q.w, (n - 1) * q.w])
    sq = np.sqrt(wvec)
    S = (sq[:, None] * M) / sq[None, :]
    S = 0.5 * (S + S.T)
    try:
        vals, vecs = eigh(S)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise ArithmeticError(f"eigenvalue solve failed: {exc}") from exc
    order = np.argsort(vals)[::-1][:k]
    eigenvalues = vals[order]
    modes, residuals, classes = [], [], []
    for idx, lam in zip(order, eigenvalues):
        v = vecs[:, idx] / sq
        h = ReducedSymTensor(q, v[:N], v[N:])
        nrm = math.sqrt(l2_inner(h, h))
        h = (1.0 / nrm) * h
        img = _apply_L_sigma(h)
        diff = img - lam * h
        residuals.append(math.sqrt(l2_inner(diff, diff)))
        modes.append(h)
        classes.append(_classify_mode(h, lam))
    return OperatorSpectrum(
        eigenvalues, modes, np.array(residuals), classes
    )


def _classify_mode(h, lam):
    q = h.quad
    n = q.n
    H = h.trace_profile()
    trace_frac = q.scalar_inner(H, H) / n / max(l2_inner(h, h), 1e-300)
    kind = "trace" if trace_frac > 0.5 else "tracefree"
    # invert lam = 2(n-1) - j(n+j-1) for the nearest integer level
    disc = (n - 1) ** 2 + 4.0 * (2 * (n - 1) - lam)
    j = int(round((-(n - 1) + math.sqrt(max(disc, 0.0))) / 2.0)) if disc >= 0 else -1
    return f"{kind}:j={j}"


def export_spectrum_csv(spec, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "eigenvalue", "residual", "mode_class"])
        for i, (lam, res, cls) in enumerate(
            zip(spec.eigenvalues, spec.residuals, spec.mode_classes)
        ):
            writer.writerow([i, f"{lam:.17g}", f"{res:.17g}", cls])


# ---------------------------------------------------------------------------
# unstable/neutral/stable decomposition of a metric about a background

@dataclass(frozen=True)
class SpectralDecomp:
    """Coordinates (a, b, check) of g = (a + sum_k b_k x^k) ghat + check.

    Only the axis component of b survives in the reduced class (stored
    last); check is sigma-orthogonal to ghat and to the axis mode.
    """

    a: float
    b: np.ndarray
    check: ReducedSymTensor
    background: ReducedMetric

    @property
    def b_axis(self):
        return float(self.b[-1])


def decompose(g, ghat):
    """Project g - ghat on ghat and the axis conformal mode x^{n+1} ghat.

    Uses sigma inner products throughout; for backgrounds orthogonal to
    their axis mode (e.g. sigma itself) the projection reduces to the
    two quotient formulas, and the remainder satisfies the orthogonality
    certificates by construction.
    """
    q = g.quad
    n = q.n
    gh_t = ghat.to_tensor()
    h = g.to_tensor() - gh_t
    axis = gh_t.scaled_by_profile(q.u)
    g00 = l2_inner(gh_t, gh_t)
    g11 = l2_inner(axis, axis)
    g01 = l2_inner(gh_t, axis)
    r0 = l2_inner(gh_t, h)
    r1 = l2_inner(axis, h)
    det = g00 * g11 - g01 * g01
    ca = (g11 * r0 - g01 * r1) / det
    cb = (g00 * r1 - g01 * r0) / det
    check = h - ca * gh_t - cb * axis
    b = np.zeros(n + 1)
    b[-1] = cb
    return SpectralDecomp(1.0 + ca, b, check, ghat)


def reconstruct(d):
    """Metric (a + b_axis x^{n+1}) ghat + check of a decomposition."""
    q = d.background.quad
    gh_t = d.background.to_tensor()
    t = (
        d.a * gh_t
        + d.b_axis * gh_t.scaled_by_profile(q.u)
        + d.check
    )
    return ReducedMetric.from_frame(q, t.rad, t.orb)


def redundancy_residual(d):
    """Volume-redundancy check of the a coordinate.

    Returns lhs = |a-1| and rhs = sum b_k^2 + sup|check|^2; volume
    normalization of the reconstructed metric is a precondition.
    """
    g = reconstruct(d)
    vol = volume(g)
    target = round_volume(g.n)
    if abs(vol - target) > 1e-8 * target:
        raise ValueError(
            f"decomposition is not volume-normalized: vol = {vol:.12g}, "
            f"expected {target:.12g}"
        )
    lhs = abs(d.a - 1.0)
    rhs = float(np.sum(d.b**2)) + sup_norm(d.check) ** 2
    return {"lhs": lhs, "rhs": rhs}
