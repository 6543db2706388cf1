"""Reproducible experiment suites over the flow/gauge machinery.

A single JSON config drives every suite; outputs are CSV time series and
JSON reports whose headers carry the config hash, so identical configs
reproduce identical files apart from one timestamp line.
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffeo import DiffeoProfile, pullback
from .flows import (
    FlowParams,
    conjugacy_residual,
    entry_time,
    export_trajectory_csv,
    run_nrdf,
    run_nrf,
)
from .gauge import (
    GaugeVector,
    admissible_diffeo,
    export_gauge_report,
    fit_exp_rate,
    gauge_iteration,
    optimal_gauge,
)
from .isometry import build_isometry, continuity_modulus
from .metrics import ReducedMetric, normalize, pinching_certificate, save_metric, volume
from .spectral import decompose, export_spectrum_csv, spectrum, trace_eigenvalue
from .sphere import get_quadrature, round_volume, sup_norm

__all__ = [
    "ExperimentConfig",
    "FamilySpec",
    "sample_pinched",
    "run_suite",
    "family_continuity",
]

SUITES = ("spectrum", "flow", "gauge", "pipeline", "isometry", "family")

_SCHEMA = {
    "n": int,
    "resolution": int,
    "seed": int,
    "amplitude": float,
    "suite": str,
    "out_dir": str,
    "workers": int,
    "t_max": float,
    "thresholds": list,
    "C": float,
    "flow": {
        "dt_init": float,
        "dt_max": float,
        "adapt_tol": float,
        "t_end": float,
        "scheme": str,
    },
    "gauge": {
        "schedule_step": float,
        "schedule_max": float,
        "root_tol": float,
        "cert_margin": float,
        "t_end": float,
    },
    "family": {
        "kind": str,
        "seed_a": int,
        "seed_b": int,
        "samples": int,
        "amplitude": float,
    },
}


def _validate_block(data, schema, path=""):
    for key, val in data.items():
        if key not in schema:
            raise ValueError(f"unknown config key {path + key!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(val, dict):
                raise ValueError(f"config key {path + key!r} must be an object")
            _validate_block(val, expected, path + key + ".")
        elif expected is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ValueError(f"config key {path + key!r} must be a number")
        elif not isinstance(val, expected) or isinstance(val, bool):
            raise ValueError(
                f"config key {path + key!r} must be {expected.__name__}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 3
    resolution: int = 128
    seed: int = 7
    amplitude: float = 0.05
    suite: str = "pipeline"
    out_dir: str = "runs"
    workers: int = 1
    t_max: float = 20.0
    thresholds: tuple = (1e-2, 1e-2)
    C: float = 1.0
    flow: FlowParams = field(default_factory=FlowParams)
    gauge_schedule_step: float = 1.0
    gauge_schedule_max: float = 8.0
    gauge_root_tol: float = 1e-10
    gauge_cert_margin: float = 2.0
    gauge_t_end: float = 14.0
    family_kind: str = "interpolate"
    family_seed_a: int = 7
    family_seed_b: int = 11
    family_samples: int = 9
    family_amplitude: float = 0.05

    @classmethod
    def from_dict(cls, data):
        _validate_block(data, _SCHEMA)
        kw = {}
        for key in ("n", "resolution", "seed", "amplitude", "suite", "out_dir",
                    "workers", "t_max", "C"):
            if key in data:
                kw[key] = data[key]
        if "thresholds" in data:
            kw["thresholds"] = tuple(float(v) for v in data["thresholds"])
        flow_kw = dict(data.get("flow", {}))
        if flow_kw:
            kw["flow"] = FlowParams(**flow_kw)
        for src, dst in (
            ("schedule_step", "gauge_schedule_step"),
            ("schedule_max", "gauge_schedule_max"),
            ("root_tol", "gauge_root_tol"),
            ("cert_margin", "gauge_cert_margin"),
            ("t_end", "gauge_t_end"),
        ):
            if src in data.get("gauge", {}):
                kw[dst] = data["gauge"][src]
        for src, dst in (
            ("kind", "family_kind"),
            ("seed_a", "family_seed_a"),
            ("seed_b", "family_seed_b"),
            ("samples", "family_samples"),
            ("amplitude", "family_amplitude"),
        ):
            if src in data.get("family", {}):
                kw[dst] = data["family"][src]
        cfg = cls(**kw)
        if cfg.suite not in SUITES:
            raise ValueError(f"unknown suite {cfg.suite!r}; choose from {SUITES}")
        return cfg

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return {
            "n": self.n,
            "resolution": self.resolution,
            "seed": self.seed,
            "amplitude": self.amplitude,
            "suite": self.suite,
            "out_dir": self.out_dir,
            "workers": self.workers,
            "t_max": self.t_max,
            "thresholds": list(self.thresholds),
            "C": self.C,
            "flow": dataclasses.asdict(self.flow),
            "gauge": {
                "schedule_step": self.gauge_schedule_step,
                "schedule_max": self.gauge_schedule_max,
                "root_tol": self.gauge_root_tol,
                "cert_margin": self.gauge_cert_margin,
                "t_end": self.gauge_t_end,
            },
            "family": {
                "kind": self.family_kind,
                "seed_a": self.family_seed_a,
                "seed_b": self.family_seed_b,
                "samples": self.family_samples,
                "amplitude": self.family_amplitude,
            },
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def schedule(self):
        k = int(round(self.gauge_schedule_max / self.gauge_schedule_step))
        return np.arange(k + 1) * self.gauge_schedule_step


# ---------------------------------------------------------------------------
# pinched initial data

def _pinched_coefficients(rng, amplitude):
    c = rng.uniform(-amplitude, amplitude, size=4)  # harmonics j = 1..4
    n1 = np.array([1.0, 1.0, 1.0, 1.0])
    n2 = np.array([-1.0, 1.0, -1.0, 1.0])
    c = c - (c @ n1) / 4.0 * n1 - (c @ n2) / 4.0 * n2
    return c


def _quarter_pinched_scale_free(g):
    """Strict quarter-pinching of the curvature-scaled representative.

    A metric with volume omega_n and a sectional curvature somewhere
    below 1 always has one above 1 as well (volume comparison), so the
    class membership is certified scale-free: after dividing by the top
    sectional curvature all sections must lie in (1/4, 1].
    """
    cert = pinching_certificate(g)
    if not cert.max_sec > 0:
        return False, cert
    scaled = ReducedMetric(
        g.quad, math.sqrt(cert.max_sec) * g.phi, math.sqrt(cert.max_sec) * g.psi
    )
    cert_scaled = pinching_certificate(scaled)
    return cert_scaled.pinched, cert_scaled


def sample_pinched(seed, amplitude, n, resolution=128, max_tries=100):
    """Deterministic pinched initial data from seeded low harmonics.

    psi = sin(x) (1 + sum_{j=1..4} c_j cos(jx)) with |c_j| <= amplitude,
    the coefficients projected on the pole-closure constraints (the sums
    of c_j and of (-1)^j c_j vanish), phi = 1.  The draw is rejected
    until the scale-free quarter-pinching certificate passes; the
    returned metric is volume-normalized (the flow-ready representative,
    whose top curvature sits slightly above 1 whenever it is not round).
    """
    if amplitude > 0.1:
        raise ValueError("amplitude must be at most 0.1")
    quad = get_quadrature(n, resolution)
    if amplitude == 0.0:
        return ReducedMetric.round(quad)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        c = _pinched_coefficients(rng, amplitude)
        modulation = 1.0 + sum(
            c[j - 1] * np.cos(j * quad.x) for j in range(1, 5)
        )
        if np.any(modulation <= 0):
            continue
        g = ReducedMetric(quad, np.ones(resolution), quad.s * modulation)
        ok, _ = _quarter_pinched_scale_free(g)
        if ok:
            return normalize(g).validate()
    raise RuntimeError(
        f"no pinched sample found in {max_tries} draws "
        f"(seed={seed}, amplitude={amplitude}, n={n})"
    )


# ---------------------------------------------------------------------------
# family generator

@dataclass(frozen=True)
class FamilySpec:
    """Continuous-by-construction family of pinched metrics over [0, 1]."""

    n: int
    resolution: int
    kind: str = "interpolate"  # interpolate | crossing | constant
    seed_a: int = 7
    seed_b: int = 11
    amplitude: float = 0.05
    samples: tuple = ()

    def parameter_samples(self, count=None):
        if self.samples and count is None:
            return np.asarray(self.samples, dtype=float)
        count = count if count is not None else 9
        return np.linspace(0.0, 1.0, count)

    def _coeffs(self, seed):
        rng = np.random.default_rng(seed)
        return _pinched_coefficients(rng, self.amplitude)

    def metric_at(self, xval):
        quad = get_quadrature(self.n, self.resolution)
        ca = self._coeffs(self.seed_a)
        if self.kind == "constant":
            c = ca
        elif self.kind == "crossing":
            c = (2.0 * xval - 1.0) * ca
        elif self.kind == "interpolate":
            cb = self._coeffs(self.seed_b)
            c = (1.0 - xval) * ca + xval * cb
        else:
            raise ValueError(f"unknown family kind {self.kind!r}")
        modulation = 1.0 + sum(c[j - 1] * np.cos(j * quad.x) for j in range(1, 5))
        g = ReducedMetric(quad, np.ones(self.resolution), quad.s * modulation)
        ok, cert = _quarter_pinched_scale_free(g)
        if not ok:
            raise ValueError(
                f"family leaves the pinched class at x={xval} "
                f"(scaled sec in [{cert.min_sec:.3f}, {cert.max_sec:.3f}])"
            )
        return normalize(g).validate()


# ---------------------------------------------------------------------------
# output helpers

def _timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _header(config):
    return [
        f"generated {_timestamp()}",
        f"config_hash {config.config_hash()}",
    ]


def _write_summary(out_dir, config, gates, extra=None):
    passed = all(g["pass"] for g in gates)
    payload = {
        "config_hash": config.config_hash(),
        "suite": config.suite,
        "passed": passed,
        "gates": gates,
    }
    if extra:
        payload.update(extra)
    path = Path(out_dir) / "summary.json"
    path.write_text(json.dumps(payload, indent=1, default=float))
    return passed


def _gate(name, measured, threshold, ok):
    return {
        "name": name,
        "measured": float(measured),
        "threshold": float(threshold),
        "pass": bool(ok),
    }


# ---------------------------------------------------------------------------
# suites

def _suite_spectrum(config, out_dir):
    n = config.n
    quad = get_quadrature(n, config.resolution)
    ghat = ReducedMetric.round(quad)
    spec = spectrum(ghat, k=8)
    export_spectrum_csv(spec, out_dir / "spectrum.csv", _header(config))
    gates = [
        _gate("lead_eigenvalue_n_minus_2",
              abs(spec.eigenvalues[0] - (n - 2)), 1e-6,
              abs(spec.eigenvalues[0] - (n - 2)) <= 1e-6),
        _gate("null_eigenvalue", abs(spec.eigenvalues[1]), 1e-6,
              abs(spec.eigenvalues[1]) <= 1e-6),
        _gate("stable_gap", spec.eigenvalues[2], -4 + 1e-4,
              spec.eigenvalues[2] <= -4 + 1e-4),
        _gate("residual_max", float(spec.residuals.max()), 1e-8,
              float(spec.residuals.max()) <= 1e-8),
    ]
    return gates, {"eigenvalues": [float(v) for v in spec.eigenvalues]}


def _suite_flow(config, out_dir):
    n = config.n
    quad = get_quadrature(n, config.resolution)
    sigma = ReducedMetric.round(quad)
    params = config.flow.with_(t_end=min(10.0, config.t_max))
    traj_sigma = run_nrf(sigma, params)
    drift = float(traj_sigma.steps["sup_dev"].max())
    g0 = sample_pinched(config.seed, config.amplitude, n, config.resolution)
    params2 = config.flow.with_(t_end=config.t_max)
    traj = run_nrf(g0, params2)
    export_trajectory_csv(traj, out_dir / "trajectory.csv", _header(config))
    vol_drift = float(np.abs(traj.steps["volume"] - volume(g0)).max())
    cert = pinching_certificate(traj.metrics[-1])
    final_dev = max(abs(cert.min_sec - 1.0), abs(cert.max_sec - 1.0))
    omega = round_volume(n)
    gates = [
        _gate("round_fixed_point_drift", drift, 1e-10, drift <= 1e-10),
        _gate("volume_conservation", vol_drift, 1e-6 * omega,
              vol_drift <= 1e-6 * omega),
        _gate("curvature_convergence", final_dev, 1e-6, final_dev <= 1e-6),
    ]
    return gates, {"entry_time": entry_time(traj, list(config.thresholds), config.C)}


def _suite_gauge(config, out_dir):
    n = config.n
    g0 = sample_pinched(config.seed, config.amplitude, n, config.resolution)
    quad = g0.quad
    sigma = ReducedMetric.round(quad)
    params = config.flow.with_(t_end=config.gauge_t_end)
    report = gauge_iteration(
        g0, sigma, config.schedule(), params,
        root_tol=config.gauge_root_tol, cert_margin=config.gauge_cert_margin,
    )
    export_gauge_report(report, out_dir, header_lines=_header(config))
    ratios = report.monitor_flags.get("gap_ratios", [])
    # fitted Cauchy rate from consecutive-gap ratios for T >= 2
    rate_cauchy = (
        float(np.log(np.maximum(ratios[2:], 1e-300)).mean()) if len(ratios) > 2 else math.nan
    )
    gates = [
        _gate("gauge_solve_complete", report.failed_at if report.failed_at is not None else -1,
              0, report.failed_at is None),
        _gate("cauchy_rate", rate_cauchy, 0.9,
              not math.isnan(rate_cauchy) and rate_cauchy >= 0.9),
        _gate("limit_decay_rate", report.rate_limit, 1.3,
              report.rate_limit >= 1.3),
        _gate("limit_roundness", report.limit_roundness, 1e-6,
              report.limit_roundness <= 1e-6),
        _gate("check_decay_rate", report.rate_check, 1.0,
              report.rate_check >= 1.0),
    ]
    return gates, {"delta0": report.delta0, "eps_inf": report.eps_inf.axis}


def _pipeline_fiber(g0, config):
    """entry-time flow + gauge iteration + isometry for one initial metric."""
    quad = g0.quad
    sigma = ReducedMetric.round(quad)
    entry_params = config.flow.with_(t_end=min(6.0, config.t_max))
    traj = run_nrf(g0, entry_params,
                   sample_times=np.linspace(0.0, entry_params.t_end, 25))
    t_star = entry_time(traj, list(config.thresholds), math.inf)
    if not math.isfinite(t_star):
        t_star = entry_params.t_end
    g_entry = traj.metric_at(min(t_star, traj.times[-1]))
    gauge_params = config.flow.with_(t_end=config.gauge_t_end)
    report = gauge_iteration(
        g_entry, sigma, config.schedule(), gauge_params,
        root_tol=config.gauge_root_tol, cert_margin=config.gauge_cert_margin,
    )
    iso = build_isometry(report.limit_metric, roundness_tol=1e-3)
    return {"t_star": t_star, "report": report, "iso": iso}


def _suite_pipeline(config, out_dir):
    g0 = sample_pinched(config.seed, config.amplitude, config.n, config.resolution)
    res = _pipeline_fiber(g0, config)
    report = res["report"]
    export_gauge_report(report, out_dir, header_lines=_header(config))
    gates = [
        _gate("entry_time_finite", res["t_star"], config.t_max,
              math.isfinite(res["t_star"])),
        _gate("b_decay_bound_c1", report.c1_b, 1e6, math.isfinite(report.c1_b)),
        _gate("check_decay_rate", report.rate_check, 1.0, report.rate_check >= 1.0),
        _gate("limit_roundness", report.limit_roundness, 1e-6,
              report.limit_roundness <= 1e-6),
        _gate("isometry_residual", res["iso"].residual,
              10 * max(report.limit_roundness, 1e-9),
              res["iso"].residual <= 10 * max(report.limit_roundness, 1e-9)),
    ]
    return gates, {"t_star": res["t_star"], "delta0": report.delta0}


def _suite_isometry(config, out_dir):
    quad = get_quadrature(config.n, config.resolution)
    sigma = ReducedMetric.round(quad)
    rho = admissible_diffeo(GaugeVector.from_axis(config.n, 0.05), sigma)
    g = pullback(sigma, rho)
    iso = build_isometry(g)
    path = [
        pullback(sigma, admissible_diffeo(GaugeVector.from_axis(config.n, s * 0.05), sigma))
        for s in np.linspace(0.0, 1.0, 6)
    ]
    modulus = continuity_modulus(path)
    gates = [
        _gate("pullback_residual", iso.residual, 1e-6, iso.residual <= 1e-6),
        _gate("modulus_finite", modulus, 1e3, math.isfinite(modulus) and modulus < 1e3),
    ]
    return gates, {"modulus": modulus}


def family_continuity(spec, config, counts=None):
    """End-to-end continuity table of x -> limit metric over a family.

    Runs the full pipeline on each fiber, reports consecutive sup gaps
    and the discrete modulus, and repeats on a doubled sample count to
    measure the stability of the modulus.
    """
    counts = counts or (config.family_samples,)
    tables = []
    for count in counts:
        xs = spec.parameter_samples(count)
        fibers = [spec.metric_at(float(x)) for x in xs]

        def one(i):
            try:
                res = _pipeline_fiber(fibers[i], config)
                return {"x": float(xs[i]), "limit": res["report"].limit_metric,
                        "ok": True, "t_star": res["t_star"]}
            except Exception as exc:  # pragma: no cover - fiber failures are data
                return {"x": float(xs[i]), "limit": None, "ok": False,
                        "error": str(exc)}

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                rows = list(pool.map(one, range(len(xs))))
        else:
            rows = [one(i) for i in range(len(xs))]
        gaps = []
        for r1, r2 in zip(rows, rows[1:]):
            if r1["ok"] and r2["ok"]:
                gaps.append(
                    sup_norm(r1["limit"].to_tensor() - r2["limit"].to_tensor())
                )
            else:
                gaps.append(math.nan)
        dx = np.diff(xs)
        ratios = [g / d for g, d in zip(gaps, dx) if not math.isnan(g)]
        modulus = max(ratios) if ratios else math.nan
        tables.append({"x": xs, "rows": rows, "gaps": gaps, "modulus": modulus})
    return tables


def _suite_family(config, out_dir):
    spec = FamilySpec(
        n=config.n, resolution=config.resolution, kind=config.family_kind,
        seed_a=config.family_seed_a, seed_b=config.family_seed_b,
        amplitude=config.family_amplitude,
    )
    counts = (config.family_samples, 2 * config.family_samples - 1)
    tables = family_continuity(spec, config, counts=counts)
    with open(out_dir / "family.csv", "w", newline="") as fh:
        for line in _header(config):
            fh.write(f"# {line}\n")
        fh.write("count,x,gap_to_next\n")
        for tab, count in zip(tables, counts):
            for i, x in enumerate(tab["x"]):
                gap = tab["gaps"][i] if i < len(tab["gaps"]) else math.nan
                fh.write(f"{count},{x:.17g},{gap:.17g}\n")
    m1, m2 = tables[0]["modulus"], tables[1]["modulus"]
    stable = (
        math.isfinite(m1) and math.isfinite(m2)
        and abs(m2 - m1) <= 0.3 * max(m1, m2)
    )
    all_ok = all(r["ok"] for tab in tables for r in tab["rows"])
    gates = [
        _gate("fibers_complete", float(all_ok), 1.0, all_ok),
        _gate("modulus_finite", m1, 1e4, math.isfinite(m1)),
        _gate("modulus_stable_under_refinement", abs(m2 - m1) / max(m1, 1e-300),
              0.3, stable),
    ]
    return gates, {"modulus_coarse": m1, "modulus_fine": m2}


_SUITE_FNS = {
    "spectrum": _suite_spectrum,
    "flow": _suite_flow,
    "gauge": _suite_gauge,
    "pipeline": _suite_pipeline,
    "isometry": _suite_isometry,
    "family": _suite_family,
}


def run_suite(config):
    """Execute the configured suite; returns (exit_status, summary_path).

    Exit status is nonzero iff at least one hard gate failed; each suite
    writes into its own subdirectory of out_dir.
    """
    out_dir = Path(config.out_dir) / config.suite
    out_dir.mkdir(parents=True, exist_ok=True)
    gates, extra = _SUITE_FNS[config.suite](config, out_dir)
    passed = _write_summary(out_dir, config, gates, extra)
    return (0 if passed else 1), out_dir / "summary.json"
