"""Likelihood estimation, sample statistics and failure accounting."""

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import wasserstein_distance

from .chain import (
    DriftSpec,
    NoiseSchedule,
    drift_eval,
    log_forward_transition,
    log_reverse_transition,
    simulate_forward,
)
from .equivariance import kabsch
from .geometry import dihedral_angle
from .solver import NewtonConfig


class AllPathsFailed(RuntimeError):
    """Every forward path from a point failed to project."""


@dataclass
class NllEstimate:
    """Importance-sampled negative log-likelihood.

    Attributes:
        mean_nll: Mean over points with at least one usable path (nats).
        per_point: Per-point estimates; NaN where every path failed.
        paths_per_point: Paths requested per point.
        standard_error: Standard error of ``mean_nll`` across points.
        paths_used: Usable paths per point.
        failed_paths: Total paths dropped because projection failed.
        missing_points: Points with no usable path.
    """

    mean_nll: float
    per_point: np.ndarray
    paths_per_point: int
    standard_error: float
    paths_used: np.ndarray
    failed_paths: int = 0
    missing_points: int = 0


def path_log_weights(m, model, paths, schedule, drift, prior_logdensity, cfg, use_ema=True):
    """``log p(x^N) + sum_k [log p_theta(x^k | x^(k+1)) - log q(x^(k+1) | x^k)]`` per path.

    ``paths`` is a ``(R, N + 1, n)`` array of forward paths produced by the
    projection solver, so the forward densities skip the support test.
    """
    count, nsteps1, n = paths.shape
    nsteps = nsteps1 - 1
    w = np.asarray(prior_logdensity(paths[:, -1]), dtype=float).copy()
    if nsteps == 0:
        return w
    x0 = paths[:, :-1].reshape(-1, n)
    x1 = paths[:, 1:].reshape(-1, n)
    sig = np.tile(schedule.sigmas, count)
    t = np.tile(schedule.score_time(np.arange(nsteps)) / schedule.T, count)
    b0 = drift_eval(drift, x0)
    b1 = drift_eval(drift, x1)
    s = model.forward(x1, t, use_ema)
    lq = log_forward_transition(m, x0, x1, sig, b0, support=False, cfg=cfg)
    lp = log_reverse_transition(m, x0, x1, sig, s, b1, support=True, cfg=cfg)
    return w + np.sum((lp - lq).reshape(count, nsteps), axis=1)


def nll(
    m,
    model,
    points,
    schedule: NoiseSchedule,
    drift: DriftSpec,
    prior_logdensity: Callable,
    paths_per_point: int,
    rng: np.random.Generator,
    cfg: NewtonConfig = NewtonConfig(),
    use_ema: bool = True,
    max_rows: int = 200000,
) -> NllEstimate:
    """Estimate ``-log p_theta(x)`` for each point by averaging path weights.

    Per point, ``-(logsumexp_j w_j - log J)`` over the ``J`` paths whose
    projections all converged. Points without any such path are reported as
    NaN, excluded from the mean and counted.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if paths_per_point < 1:
        raise ValueError("paths_per_point must be at least 1")
    npts = pts.shape[0]
    J = int(paths_per_point)
    per_point = np.full(npts, np.nan)
    used = np.zeros(npts, dtype=int)
    failed = 0
    group = max(1, max_rows // (J * max(schedule.N, 1)))
    for lo in range(0, npts, group):
        sub = pts[lo:lo + group]
        rep = np.repeat(sub, J, axis=0)
        tb = simulate_forward(m, rep, schedule, drift, rng, cfg, on_failure="drop")
        failed += int(np.sum(~tb.ok))
        w = np.full(rep.shape[0], -np.inf)
        if np.any(tb.ok):
            w[tb.ok] = path_log_weights(m, model, tb.points[tb.ok], schedule, drift, prior_logdensity, cfg, use_ema)
        w = w.reshape(sub.shape[0], J)
        ok = tb.ok.reshape(sub.shape[0], J)
        cnt = ok.sum(axis=1)
        with np.errstate(divide="ignore"):
            lse = logsumexp(np.where(ok, w, -np.inf), axis=1)
            est = -(lse - np.log(np.maximum(cnt, 1)))
        per_point[lo:lo + sub.shape[0]] = np.where(cnt > 0, est, np.nan)
        used[lo:lo + sub.shape[0]] = cnt
    missing = int(np.sum(used == 0))
    if failed:
        warnings.warn(f"{failed} likelihood paths dropped after projection failure", RuntimeWarning)
    good = per_point[np.isfinite(per_point)]
    if good.size == 0:
        raise AllPathsFailed("no point has a usable path")
    se = float(np.std(good, ddof=1) / np.sqrt(good.size)) if good.size > 1 else 0.0
    return NllEstimate(float(np.mean(good)), per_point, J, se, used, failed, missing)


# ---------------------------------------------------------------------------
# Histograms and distances
# ---------------------------------------------------------------------------


@dataclass
class HistogramSummary:
    """Histogram with explicit edges; ``values`` keeps the raw statistic."""

    edges: np.ndarray
    counts: np.ndarray
    statistic_name: str
    values: Optional[np.ndarray] = field(default=None, repr=False)


def histogram(values, name: str, bins: int = 100, value_range=None) -> HistogramSummary:
    """Uniform bins over ``value_range`` or the data range (widened if degenerate)."""
    values = np.asarray(values, dtype=float).ravel()
    if value_range is None:
        if values.size:
            lo, hi = float(values.min()), float(values.max())
        else:
            lo, hi = 0.0, 1.0
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return HistogramSummary(edges, counts, name, values)


def trace_powers(samples, powers: Sequence[int]) -> Dict[int, np.ndarray]:
    """``tr(S^p)`` for every sample and every requested nonnegative power."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    powers = sorted(set(int(p) for p in powers))
    if powers and powers[0] < 0:
        raise ValueError("powers must be nonnegative")
    out = {}
    cur = np.broadcast_to(np.eye(s.shape[-1]), s.shape).copy()
    p = 0
    for target in powers:
        while p < target:
            cur = cur @ s
            p += 1
        out[target] = np.trace(cur, axis1=-2, axis2=-1)
    return out


def trace_moments(samples, powers: Sequence[int] = (1, 2, 4, 5), bins: int = 100) -> Dict[int, HistogramSummary]:
    """Histograms of ``tr(S^p)`` over a set of square matrices."""
    return {p: histogram(v, f"tr_S{p}", bins) for p, v in trace_powers(samples, powers).items()}


@dataclass
class Tr3Spread:
    std: float
    y_std: Optional[float]


def tr3_concentration_check(samples, y_std: Optional[float] = None) -> Tr3Spread:
    """Spread of ``tr(S^3)`` over samples drawn around one center.

    Near a center whose blocks rotate by ``pi/3`` the statistic moves only at
    second order in the tangent perturbation, so the spread scales like ``y_std^2``.
    """
    vals = trace_powers(samples, [3])[3]
    return Tr3Spread(float(np.std(vals)), y_std)


def wasserstein1_1d(a, b) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions on the line."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    return float(wasserstein_distance(a, b))


# ---------------------------------------------------------------------------
# Failure accounting
# ---------------------------------------------------------------------------


@dataclass
class FailureReport:
    forward_failures: int
    forward_attempts: int
    reverse_failures: int
    reverse_attempts: int

    @staticmethod
    def _pct(f, a):
        return 100.0 * f / a if a else 0.0

    @property
    def r_fail_fwd(self) -> float:
        """Percentage of discarded forward paths."""
        return self._pct(self.forward_failures, self.forward_attempts)

    @property
    def r_fail_bwd(self) -> float:
        """Percentage of discarded reverse paths."""
        return self._pct(self.reverse_failures, self.reverse_attempts)


def failure_report(forward=None, reverse=None) -> FailureReport:
    """Collect discard percentages from path batches (or ``(failures, attempts)`` pairs)."""

    def counts(obj):
        if obj is None:
            return 0, 0
        if isinstance(obj, tuple):
            return int(obj[0]), int(obj[1])
        return int(obj.failures), int(obj.attempts)

    ff, fa = counts(forward)
    rf, ra = counts(reverse)
    return FailureReport(ff, fa, rf, ra)


def dihedral_and_rmsd_stats(
    samples,
    references: Dict[str, np.ndarray],
    angles: Dict[str, Sequence[int]],
    bins: int = 100,
) -> Dict[str, HistogramSummary]:
    """Histograms of dihedral angles (degrees) and Kabsch RMSDs to references.

    Args:
        samples: ``(M, 3 * atoms)`` flat point clouds.
        references: Name to reference cloud; gives ``rmsd_<name>`` histograms.
        angles: Name to four atom indices; gives ``<name>`` histograms in degrees.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    out = {}
    for name, idx in angles.items():
        out[name] = histogram(np.degrees(dihedral_angle(x, tuple(idx))), name, bins)
    for name, ref in references.items():
        out[f"rmsd_{name}"] = histogram(kabsch(x, ref).rmsd, f"rmsd_{name}", bins)
    return out


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_nll_csv(path, est: NllEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point_index", "nll", "paths_used"])
        for i, (v, c) in enumerate(zip(est.per_point, est.paths_used)):
            w.writerow([i, "" if not np.isfinite(v) else repr(float(v)), int(c)])


def write_histogram_csv(path, h: HistogramSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_lo", "edge_hi", "count"])
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def write_failures_csv(path, rep: FailureReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "failures", "attempts", "percent"])
        w.writerow(["forward", rep.forward_failures, rep.forward_attempts, repr(rep.r_fail_fwd)])
        w.writerow(["reverse", rep.reverse_failures, rep.reverse_attempts, repr(rep.r_fail_bwd)])
