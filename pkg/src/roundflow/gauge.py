"""Admissible re-gauging along the gauge-fixed flow and limit extraction.

The admissible family is the conformal flow of the axis field
grad(x^{n+1}) of the round metric: theta_eps(x) = 2 atan(e^{eps/2}
tan(x/2)), an exact one-parameter group whose pullback acts on round
metrics as multiplication by 1 + eps cos(x) to first order.  The
re-gauging problem at time T tunes eps so that the unstable conformal
amplitude vanishes at T, b(T, T) = 0; iterating over a schedule of
horizons yields a Cauchy sequence of gauges whose limit produces a
flow converging to an explicit round metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffeo import DiffeoProfile, pullback
from .flows import FlowParams, run_nrdf
from .metrics import ReducedMetric, pinching_certificate, volume
from .spectral import decompose
from .sphere import ReducedSymTensor, l2_inner, round_volume, sobolev_norm, sup_norm

__all__ = [
    "EPS_MAX",
    "GaugeVector",
    "GaugeRunReport",
    "NoAdmissibleGaugeError",
    "admissible_diffeo",
    "admissibility_residual",
    "optimal_gauge",
    "decay_monitor",
    "gauge_iteration",
    "initial_smallness",
    "fit_exp_rate",
    "export_gauge_report",
]

EPS_MAX = 0.2


class NoAdmissibleGaugeError(RuntimeError):
    """Root solve for the optimal gauge left the admissible ball."""


@dataclass(frozen=True)
class GaugeVector:
    """Conformal gauge parameters; only the axis slot is active in the
    reduced class (stored last)."""

    eps: np.ndarray

    def __post_init__(self):
        eps = np.ascontiguousarray(self.eps, dtype=float)
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)
        if self.norm() > EPS_MAX:
            raise NoAdmissibleGaugeError(
                f"|eps| = {self.norm():.4f} exceeds eps_max = {EPS_MAX}"
            )

    @classmethod
    def from_axis(cls, n, value):
        e = np.zeros(n + 1)
        e[-1] = value
        return cls(e)

    @property
    def axis(self):
        return float(self.eps[-1])

    def norm(self):
        return float(np.linalg.norm(self.eps))


def _axis_value(eps):
    if isinstance(eps, GaugeVector):
        return eps.axis
    return float(eps)


def admissible_diffeo(eps, ghat):
    """Admissible axis diffeomorphism phi(eps) as a profile.

    Exact formula theta = 2 atan(e^{eps/2} tan(x/2)); the family is a
    one-parameter group, so phi(eps) and phi(-eps) are exact inverses.
    """
    e = _axis_value(eps)
    if abs(e) > EPS_MAX:
        raise NoAdmissibleGaugeError(
            f"|eps| = {abs(e):.4f} exceeds eps_max = {EPS_MAX}"
        )
    q = ghat.quad
    theta = 2.0 * np.arctan(math.exp(e / 2.0) * np.tan(q.x / 2.0))
    return DiffeoProfile(q, theta)


def admissibility_residual(eps, g):
    """Sup deviation of phi(eps)^* g from (1 + eps x^{n+1}) g.

    Quadratic in eps on round metrics; on non-round metrics the residual
    carries an additional term of size |eps| times the distance of g from
    the round orbit (the first-order factor of the fixed conformal family
    is exactly cos(x) only on round backgrounds).
    """
    e = _axis_value(eps)
    d = admissible_diffeo(e, g)
    pulled = pullback(g, d).to_tensor()
    target = g.to_tensor().scaled_by_profile(1.0 + e * g.quad.u)
    return sup_norm(pulled - target)


# ---------------------------------------------------------------------------
# the optimal gauge at one horizon

def _b_at_horizon(g0, ghat, T, params, eps, sample_times=None):
    d = admissible_diffeo(eps, ghat)
    g_eps = pullback(g0, d)
    if T <= 0.0:
        dec = decompose(g_eps, ghat)
        return dec.b_axis, None
    traj = run_nrdf(
        g_eps, ghat, params.with_(t_end=float(T)), sample_times=sample_times
    )
    return float(traj.steps["b_axis"][-1]), traj


def optimal_gauge(
    g0,
    ghat,
    T,
    params,
    eps_init=None,
    root_tol=1e-10,
    max_iter=40,
    sample_times=None,
):
    """Unique admissible gauge killing the unstable amplitude at time T.

    Solves b(T) = 0 over the axis parameter by a safeguarded secant
    iteration (each evaluation is a flow solve on [0, T]); returns the
    gauge vector and the re-gauged trajectory with decomposition
    diagnostics.
    """
    n = g0.quad.n
    dec0 = decompose(g0, ghat)
    e0 = float(eps_init) if eps_init is not None else -dec0.b_axis / dec0.a
    if abs(e0) > EPS_MAX:
        raise NoAdmissibleGaugeError(
            f"initial gauge guess {e0:.4f} outside the admissible ball"
        )

    def f(e):
        b, _ = _b_at_horizon(g0, ghat, T, params, e)
        return b

    f0 = f(e0)
    bracket = None
    if abs(f0) > root_tol:
        e1 = e0 + max(1e-4, 0.05 * abs(e0))
        f1 = f(e1)
        for _ in range(max_iter):
            if abs(f1) <= root_tol:
                e0, f0 = e1, f1
                break
            if f0 * f1 < 0:
                bracket = (e0, e1) if e0 < e1 else (e1, e0)
            denom = f1 - f0
            if denom == 0.0:
                raise NoAdmissibleGaugeError("flat secant in the gauge solve")
            step = -f1 * (e1 - e0) / denom
            e2 = e1 + step
            if bracket is not None and not (bracket[0] <= e2 <= bracket[1]):
                e2 = 0.5 * (bracket[0] + bracket[1])
            if abs(e2) > EPS_MAX:
                raise NoAdmissibleGaugeError(
                    f"gauge solve left the admissible ball at eps = {e2:.4f}"
                )
            f2 = f(e2)
            if f1 * f2 < 0:
                bracket = (e1, e2) if e1 < e2 else (e2, e1)
            e0, f0, e1, f1 = e1, f1, e2, f2
            if abs(e1 - e0) < 1e-16 and abs(f1) > root_tol:
                raise NoAdmissibleGaugeError(
                    f"gauge solve stagnated with |b(T)| = {abs(f1):.3e}"
                )
        else:
            raise NoAdmissibleGaugeError(
                f"gauge solve did not converge: |b(T)| = {abs(f1):.3e} after {max_iter} iterations"
            )
        e0, f0 = e1, f1
    b_final, traj = _b_at_horizon(g0, ghat, T, params, e0, sample_times=sample_times)
    if traj is None:
        d = admissible_diffeo(e0, ghat)
        traj = run_nrdf(
            pullback(g0, d), ghat, params.with_(t_end=0.0), sample_times=[0.0]
        )
    if abs(b_final) > 10 * root_tol:
        raise NoAdmissibleGaugeError(
            f"re-gauged run misses the terminal condition: |b(T)| = {abs(b_final):.3e}"
        )
    return {"eps_T": GaugeVector.from_axis(n, e0), "traj": traj}


# ---------------------------------------------------------------------------
# decay monitoring

def fit_exp_rate(t, y, floor=1e-13):
    """Least-squares exponential rate of decay (positive = decaying).

    Fits log y over the samples where y exceeds the floor; returns
    (rate, amplitude) of y ~ amplitude * exp(-rate * t).
    """
    t = np.asarray(t, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    mask = y > floor
    if mask.sum() < 3:
        raise ValueError("too few samples above the floor for a rate fit")
    tt, yy = t[mask], np.log(y[mask])
    A = np.vstack([np.ones_like(tt), tt]).T
    coef, *_ = np.linalg.lstsq(A, yy, rcond=None)
    return -float(coef[1]), float(math.exp(coef[0]))


def initial_smallness(g0, ghat):
    """delta_0 = |1 - a(0)| + sum |b_k(0)| + Sobolev-(2n) norm of check(0)."""
    d = decompose(g0, ghat)
    n = g0.quad.n
    sob = sobolev_norm(d.check, 2 * n)
    return abs(d.a - 1.0) + float(np.abs(d.b).sum()) + sob


def decay_monitor(traj, delta0=None, eps_T=None, c1=None, floor=1e-12):
    """Exponential-decay diagnostics of an optimally gauged run.

    Fits |b|(t) from the dense step record and the order-2n Sobolev norm
    of the orthogonal remainder from the stored samples; reports the
    smallest constants making the bounds |b| <= c1 delta0^2 e^{-t} and
    Sob(check) <= c1 delta0 e^{-t} true, and checks them against a
    supplied c1 when given.
    """
    ghat = traj.background
    n = ghat.quad.n
    ts = traj.steps["t"]
    bs = np.abs(traj.steps["b_axis"])
    sob_t, sob_v = [], []
    for t, g in zip(traj.times, traj.metrics):
        d = decompose(g, ghat)
        sob_t.append(t)
        sob_v.append(sobolev_norm(d.check, 2 * n))
    sob_t = np.array(sob_t)
    sob_v = np.array(sob_v)
    if delta0 is None:
        d0 = decompose(traj.metrics[0], ghat)
        delta0 = abs(d0.a - 1.0) + float(np.abs(d0.b).sum()) + sob_v[0]
    out = {"delta0": float(delta0)}
    try:
        out["rate_b"], _ = fit_exp_rate(ts, bs, floor=floor)
    except ValueError:
        out["rate_b"] = math.inf  # amplitude never rose above the floor
    try:
        out["rate_check"], _ = fit_exp_rate(sob_t, sob_v, floor=floor)
    except ValueError:
        out["rate_check"] = math.inf
    expb = np.exp(ts)
    out["c1_b"] = float((bs * expb).max() / delta0**2) if delta0 > 0 else 0.0
    out["c1_check"] = (
        float((sob_v * np.exp(sob_t)).max() / delta0) if delta0 > 0 else 0.0
    )
    out["sob_times"] = sob_t
    out["sob_values"] = sob_v
    if eps_T is not None:
        out["eps_bound_ok"] = bool(eps_T.norm() <= delta0 ** (9.0 / 10.0))
    if c1 is not None:
        out["bound_b_ok"] = bool(np.all(bs <= c1 * delta0**2 * np.exp(-ts) + 1e-300))
        out["bound_check_ok"] = bool(np.all(sob_v <= c1 * delta0 * np.exp(-sob_t) + 1e-300))
    return out


# ---------------------------------------------------------------------------
# the gauge iteration

@dataclass(frozen=True)
class GaugeRunReport:
    schedule: np.ndarray
    eps_per_T: list
    cauchy_gaps: np.ndarray
    check_gaps: np.ndarray
    delta0: float
    rate_b: float
    rate_check: float
    rate_limit: float
    c1_b: float
    c1_check: float
    cauchy_constant: float
    monitor_flags: dict
    limit_metric: ReducedMetric
    limit_eps: GaugeVector
    eps_inf: GaugeVector
    failed_at: int | None
    limit_roundness: float
    limit_series: dict


def _aitken(values):
    if len(values) < 3:
        return values[-1]
    x0, x1, x2 = values[-3:]
    denom = (x2 - x1) - (x1 - x0)
    if abs(denom) < 1e-300:
        return x2
    return x2 - (x2 - x1) ** 2 / denom


def gauge_iteration(
    g0,
    ghat0,
    schedule,
    params,
    root_tol=1e-10,
    cert_margin=2.0,
):
    """Optimal gauges over a schedule of horizons, Cauchy verification,
    and extraction of the limit gauge and limit round metric.

    The certification run re-solves the gauge at T = t_end - cert_margin
    and integrates to t_end; its endpoint is the limit metric and the
    decay of |g(t) - limit| along it is the measured convergence rate.
    """
    schedule = np.asarray(schedule, dtype=float)
    if len(schedule) == 0 or schedule[0] != 0.0:
        raise ValueError("schedule must start at T = 0")
    if np.any(np.diff(schedule) <= 0):
        raise ValueError("schedule must be strictly increasing")
    q = g0.quad
    n = q.n
    delta0 = initial_smallness(g0, ghat0)

    eps_list = []
    pulled = []
    checks0 = []
    failed_at = None
    eps_prev = None
    for i, T in enumerate(schedule):
        try:
            sol = optimal_gauge(
                g0, ghat0, float(T), params, eps_init=eps_prev, root_tol=root_tol
            )
        except (NoAdmissibleGaugeError, RuntimeError) as exc:
            failed_at = i
            break
        eps_list.append(sol["eps_T"])
        eps_prev = sol["eps_T"].axis
        gg = pullback(g0, admissible_diffeo(sol["eps_T"], ghat0))
        pulled.append(gg)
        checks0.append(decompose(gg, ghat0).check)

    m = len(eps_list)
    gaps = np.zeros((m, m))
    cgaps = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            gaps[i, j] = gaps[j, i] = sup_norm(
                pulled[j].to_tensor() - pulled[i].to_tensor()
            )
            cgaps[i, j] = cgaps[j, i] = sup_norm(checks0[j] - checks0[i])
    cauchy_constant = 0.0
    monitor_flags = {"cauchy_ok": True}
    for i in range(m):
        for j in range(i + 1, m):
            bound = delta0**2 * math.exp(-schedule[i])
            if bound > 0:
                cauchy_constant = max(cauchy_constant, gaps[i, j] / bound)
    if m >= 4:
        tail = [gaps[i, i + 1] for i in range(m - 1)]
        ratios = [
            tail[i] / tail[i + 1]
            for i in range(len(tail) - 1)
            if tail[i + 1] > 1e-14
        ]
        monitor_flags["cauchy_ok"] = all(r > 1.0 for r in ratios[1:]) if ratios else True
        monitor_flags["gap_ratios"] = ratios

    eps_inf_val = _aitken([e.axis for e in eps_list]) if eps_list else 0.0
    eps_inf = GaugeVector.from_axis(n, eps_inf_val)

    if failed_at is not None:
        return GaugeRunReport(
            schedule=schedule, eps_per_T=eps_list, cauchy_gaps=gaps,
            check_gaps=cgaps, delta0=delta0, rate_b=math.nan,
            rate_check=math.nan, rate_limit=math.nan, c1_b=math.nan,
            c1_check=math.nan, cauchy_constant=cauchy_constant,
            monitor_flags=monitor_flags, limit_metric=g0, limit_eps=eps_inf,
            eps_inf=eps_inf, failed_at=failed_at, limit_roundness=math.nan,
            limit_series={},
        )

    # certification run: optimal gauge near the far horizon, integrated to t_end
    t_final = max(params.t_end, schedule[-1] + cert_margin)
    T_cert = t_final - cert_margin
    cert_params = params.with_(t_end=t_final)
    sol = optimal_gauge(
        g0, ghat0, T_cert, cert_params,
        eps_init=eps_list[-1].axis, root_tol=root_tol,
        sample_times=np.linspace(0.0, t_final, max(17, int(2 * t_final) + 1)),
    )
    traj = sol["traj"]
    limit_metric = traj.metrics[-1]
    cert = pinching_certificate(limit_metric)
    limit_roundness = max(abs(cert.min_sec - 1.0), abs(cert.max_sec - 1.0))

    mon = decay_monitor(traj, delta0=delta0, eps_T=sol["eps_T"])
    lim_t = traj.times
    lim_dev = np.array(
        [sup_norm(g.to_tensor() - limit_metric.to_tensor()) for g in traj.metrics]
    )
    try:
        rate_limit, _ = fit_exp_rate(
            lim_t[:-1], lim_dev[:-1], floor=max(1e-11, lim_dev.max() * 1e-9)
        )
    except ValueError:
        rate_limit = math.inf
    monitor_flags["limit_decay_ok"] = bool(
        np.all(lim_dev <= max(10.0, 2 * mon["c1_check"]) * delta0 * np.exp(-lim_t) + 1e-9)
    )

    return GaugeRunReport(
        schedule=schedule,
        eps_per_T=eps_list,
        cauchy_gaps=gaps,
        check_gaps=cgaps,
        delta0=delta0,
        rate_b=mon["rate_b"],
        rate_check=mon["rate_check"],
        rate_limit=rate_limit,
        c1_b=mon["c1_b"],
        c1_check=mon["c1_check"],
        cauchy_constant=cauchy_constant,
        monitor_flags=monitor_flags,
        limit_metric=limit_metric,
        limit_eps=sol["eps_T"],
        eps_inf=eps_inf,
        failed_at=None,
        limit_roundness=limit_roundness,
        limit_series={"t": lim_t, "dev": lim_dev, "b": traj.steps["b_axis"],
                      "t_dense": traj.steps["t"]},
    )


def export_gauge_report(report, out_dir, prefix="gauge", header_lines=()):
    """JSON summary plus CSV time series of a gauge run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schedule": [float(T) for T in report.schedule],
        "eps_axis": [e.axis for e in report.eps_per_T],
        "eps_inf_axis": report.eps_inf.axis,
        "limit_eps_axis": report.limit_eps.axis,
        "delta0": report.delta0,
        "rate_b": report.rate_b,
        "rate_check": report.rate_check,
        "rate_limit": report.rate_limit,
        "c1_b": report.c1_b,
        "c1_check": report.c1_check,
        "cauchy_constant": report.cauchy_constant,
        "limit_roundness": report.limit_roundness,
        "failed_at": report.failed_at,
        "monitor_flags": {
            k: (list(v) if isinstance(v, (list, tuple)) else v)
            for k, v in report.monitor_flags.items()
        },
        "cauchy_gaps": report.cauchy_gaps.tolist(),
        "check_gaps": report.check_gaps.tolist(),
    }
    (out / f"{prefix}_report.json").write_text(json.dumps(payload, indent=1))
    if report.limit_series:
        import csv as _csv

        with open(out / f"{prefix}_limit_series.csv", "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            wtr = _csv.writer(fh)
            wtr.writerow(["t", "sup_dev_from_limit"])
            for t, d in zip(report.limit_series["t"], report.limit_series["dev"]):
                wtr.writerow([f"{t:.17g}", f"{d:.17g}"])
    return out / f"{prefix}_report.json"
