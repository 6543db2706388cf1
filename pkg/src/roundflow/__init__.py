"""Numerical laboratory for gauge-controlled Ricci flow on sphere metrics.

The library works in the cohomogeneity-one (axisymmetric) class on S^n:
metrics g = phi(x)^2 dx^2 + psi(x)^2 g_{S^{n-1}} over the polar angle
x in [0, pi].  It provides

* spectral quadrature, harmonics and Sobolev machinery on the round
  sphere (:mod:`roundflow.sphere`, :mod:`roundflow.covariant`),
* curvature, pinching certificates and volume normalization
  (:mod:`roundflow.metrics`),
* normalized Ricci flow and Ricci-DeTurck flow integrators with the
  conjugating diffeomorphism (:mod:`roundflow.flows`),
* the linearized operator at the round metric, its spectrum and the
  unstable/neutral/stable mode decomposition (:mod:`roundflow.spectral`),
* optimal re-gauging along the flow and limit extraction
  (:mod:`roundflow.gauge`),
* isometry recovery for round metrics (:mod:`roundflow.isometry`),
* a reproducible experiment harness with a CLI (:mod:`roundflow.harness`).
"""

from .sphere import (
    Quadrature,
    HarmonicTable,
    ReducedSymTensor,
    get_quadrature,
    round_volume,
    l2_inner,
    sup_norm,
    sobolev_norm,
)
from .metrics import (
    ReducedMetric,
    CurvatureReport,
    curvature,
    pinching_certificate,
    volume,
    normalize,
    neighborhood_certificate,
)
from .diffeo import DiffeoProfile, pullback
from .spectral import (
    SpectralDecomp,
    OperatorSpectrum,
    apply_L,
    split_L0_L2,
    spectrum,
    decompose,
    reconstruct,
    redundancy_residual,
)
from .flows import (
    FlowParams,
    Trajectory,
    run_nrf,
    run_nrf_direct,
    run_nrdf,
    deturck_field,
    integrate_diffeo,
    conjugacy_residual,
    entry_time,
)
from .gauge import (
    GaugeVector,
    GaugeRunReport,
    admissible_diffeo,
    admissibility_residual,
    optimal_gauge,
    decay_monitor,
    gauge_iteration,
)
from .isometry import IsometryResult, gram_schmidt_frame, build_isometry, continuity_modulus
from .harness import ExperimentConfig, FamilySpec, sample_pinched, run_suite, family_continuity

__version__ = "0.1.0"
