"""Forward and reverse projected Markov chains on a level set.

One forward step draws ``v`` tangent at ``x``, moves to
``x + sigma^2 b(x) + sigma v`` and returns to the manifold along the normal
space at ``x``. The reverse step is the same construction with drift
``s_theta - b`` and scale ``beta``. Both have explicit transition densities
built from the inverse map :func:`g_map`.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .equivariance import rmsd_potential
from .geometry import (
    LevelSetManifold,
    sample_tangent_gaussian,
    tangent_overlap_logdet,
    tangent_project,
)
from .solver import NewtonConfig, newton_project, sphere_closed_form

#: Finite stand-in for log(0) so that sums over a path stay finite.
LOG_ZERO = -1e300


class AbortTooManyFailures(RuntimeError):
    """Trajectory regeneration exceeded its retry bound."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Step scales ``sigma_k = beta_{k+1} = sqrt(h) g(k h)`` with linear ``g``.

    ``g(t) = gamma_min + (t / T)(gamma_max - gamma_min)`` and ``h = T / N``.
    """

    T: float
    N: int
    gamma_min: float
    gamma_max: float

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("schedule T must be positive")
        if self.N < 0 or int(self.N) != self.N:
            raise ValueError("schedule N must be a nonnegative integer")
        if not (0 < self.gamma_min <= self.gamma_max):
            raise ValueError("need 0 < gamma_min <= gamma_max")

    @property
    def h(self) -> float:
        return self.T / self.N if self.N else 0.0

    def g(self, t):
        return self.gamma_min + (np.asarray(t, dtype=float) / self.T) * (self.gamma_max - self.gamma_min)

    @property
    def sigmas(self) -> np.ndarray:
        """``sigma_k`` for ``k = 0..N-1``; equal to ``beta_{k+1}``."""
        k = np.arange(self.N)
        return np.sqrt(self.h) * self.g(k * self.h)

    @property
    def betas(self) -> np.ndarray:
        """``beta_{k+1}`` indexed by ``k``, the scale of reverse step ``k+1 -> k``."""
        return self.sigmas

    def score_time(self, k) -> np.ndarray:
        """Physical time ``(k + 1) h`` at which the score is queried in step ``k+1 -> k``."""
        return (np.asarray(k) + 1) * self.h


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``b`` of the forward chain: zero, or minus the gradient of a
    harmonic RMSD potential around ``reference``."""

    kind: str = "zero"
    kappa: float = 50.0
    reference: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("zero", "rmsd_harmonic"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "rmsd_harmonic":
            if self.reference is None:
                raise ValueError("rmsd_harmonic drift needs a reference cloud")
            if self.kappa <= 0:
                raise ValueError("drift kappa must be positive")
            if np.asarray(self.reference).size % 3:
                raise ValueError("reference length must be divisible by 3")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"


ZERO_DRIFT = DriftSpec()


def drift_eval(drift: DriftSpec, x) -> np.ndarray:
    """Evaluate ``b(x)``; batched over leading axes."""
    x = np.asarray(x, dtype=float)
    if drift.is_zero:
        return np.zeros_like(x)
    ref = np.asarray(drift.reference, dtype=float).reshape(-1)
    if x.shape[-1] != ref.size:
        raise ValueError("point and reference sizes differ")
    return rmsd_potential(x, ref, drift.kappa)[1]


@dataclass
class StepOutcome:
    """Result of a batch of projected steps; ``ok`` marks converged rows."""

    y: np.ndarray
    v: np.ndarray
    ok: np.ndarray
    iterations: np.ndarray


def g_map(m: LevelSetManifold, x, y, sigma, drift_at_x) -> np.ndarray:
    """Inverse of the projected step, ``P(x)(y - x - sigma^2 b(x)) / sigma``."""
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)[..., None]
    r = np.asarray(y, dtype=float) - x - sigma**2 * np.asarray(drift_at_x, dtype=float)
    return tangent_project(m, x, r) / sigma


def _project(m, x, x_mid, cfg):
    if m.kind == "sphere":
        step = x_mid - x
        step = step - np.sum(step * x, axis=-1, keepdims=True) * x
        y, ok = sphere_closed_form(x, step)
        return y, ok, np.zeros(ok.shape, dtype=int)
    res = newton_project(m, x, x_mid, cfg)
    return res.point, res.converged, res.iterations


def _as_batch(x, scale):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    sc = np.broadcast_to(np.asarray(scale, dtype=float), xb.shape[:1])
    return xb, sc, single


def forward_step(m, x, sigma, drift: DriftSpec, rng, cfg: NewtonConfig = NewtonConfig(), v=None) -> StepOutcome:
    """One forward transition from ``x`` (a point or a batch).

    ``v`` may be supplied to replay a given tangent draw.
    """
    xb, sig, single = _as_batch(x, sigma)
    if v is None:
        v = sample_tangent_gaussian(m, xb, rng)
    v = np.atleast_2d(v)
    b = drift_eval(drift, xb)
    x_mid = xb + sig[:, None] ** 2 * b + sig[:, None] * v
    y, ok, iters = _project(m, xb, x_mid, cfg)
    if single:
        return StepOutcome(y[0], v[0], bool(ok[0]), int(iters[0]))
    return StepOutcome(y, v, ok, iters)


def reverse_step(m, x, beta, score, drift: DriftSpec, rng, cfg: NewtonConfig = NewtonConfig(), v=None) -> StepOutcome:
    """One reverse transition from ``x`` with the score already evaluated at ``x``.

    The intermediate point is ``x + beta^2 P(x)(s - b) + beta v``.
    """
    xb, bet, single = _as_batch(x, beta)
    if v is None:
        v = sample_tangent_gaussian(m, xb, rng)
    v = np.atleast_2d(v)
    eff = np.atleast_2d(score) - drift_eval(drift, xb)
    u = tangent_project(m, xb, eff)
    x_mid = xb + bet[:, None] ** 2 * u + bet[:, None] * v
    y, ok, iters = _project(m, xb, x_mid, cfg)
    if single:
        return StepOutcome(y[0], v[0], bool(ok[0]), int(iters[0]))
    return StepOutcome(y, v, ok, iters)


@dataclass
class TrajectoryBatch:
    """Forward (or reverse) paths stored as arrays.

    Attributes:
        points: ``(B, N + 1, n)``; ``points[:, k]`` is ``x^(k)``.
        draws: ``(B, N, n)`` tangent draws. For forward paths ``draws[:, k]``
            is ``v^(k)`` at ``x^(k)``; for reverse paths it is ``vbar^(k+1)``.
        ok: ``(B,)`` False for rows that failed (only with ``on_failure='drop'``).
        failures: Number of discarded attempts.
        attempts: Number of trajectories simulated, discarded ones included.
    """

    points: np.ndarray
    draws: np.ndarray
    ok: np.ndarray
    failures: int = 0
    attempts: int = 0
    max_iterations: int = 0

    def __len__(self):
        return self.points.shape[0]


def simulate_forward(
    m: LevelSetManifold,
    x0,
    schedule: NoiseSchedule,
    drift: DriftSpec,
    rng: np.random.Generator,
    cfg: NewtonConfig = NewtonConfig(),
    on_failure: str = "regenerate",
    max_attempts: int = 100,
) -> TrajectoryBatch:
    """Simulate forward paths from every row of ``x0``.

    With ``on_failure='regenerate'`` a path whose projection fails at any step
    is thrown away and redrawn with fresh noise, at most ``max_attempts``
    times; ``'drop'`` keeps the failed row marked in ``ok`` instead.

    Raises:
        AbortTooManyFailures: when a path fails ``max_attempts`` times.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    count, n = x0.shape
    nsteps = schedule.N
    points = np.empty((count, nsteps + 1, n))
    draws = np.empty((count, nsteps, n))
    points[:, 0] = x0
    ok = np.ones(count, dtype=bool)
    pending = np.arange(count)
    tries = np.zeros(count, dtype=int)
    failures = 0
    attempts = 0
    max_it = 0
    sig = schedule.sigmas
    while pending.size:
        attempts += pending.size
        tries[pending] += 1
        alive = np.ones(pending.size, dtype=bool)
        for k in range(nsteps):
            rows = pending[alive]
            if rows.size == 0:
                break
            out = forward_step(m, points[rows, k], sig[k], drift, rng, cfg)
            points[rows, k + 1] = out.y
            draws[rows, k] = out.v
            max_it = max(max_it, int(np.max(out.iterations, initial=0)))
            alive[np.flatnonzero(alive)[~out.ok]] = False
        bad = pending[~alive]
        failures += bad.size
        if on_failure == "drop":
            ok[bad] = False
            break
        if np.any(tries[bad] >= max_attempts):
            raise AbortTooManyFailures(
                f"forward path failed {max_attempts} times; reduce the step scale"
            )
        pending = bad
    return TrajectoryBatch(points, draws, ok, failures, attempts, max_it)


def simulate_reverse(
    m: LevelSetManifold,
    xN,
    schedule: NoiseSchedule,
    score_fn: Callable[[np.ndarray, float], np.ndarray],
    drift: DriftSpec,
    rng: np.random.Generator,
    cfg: NewtonConfig = NewtonConfig(),
    on_failure: str = "regenerate",
    max_attempts: int = 100,
    record_steps: Optional[Sequence[int]] = None,
) -> TrajectoryBatch:
    """Run the reverse chain from each row of ``xN`` down to step 0.

    ``score_fn(x, t)`` is called with physical time ``t = (k + 1) h`` for the
    step ``k + 1 -> k``. A failed path restarts from its own ``x^(N)``.
    If ``record_steps`` is given, only those ``k`` are kept in ``points``
    (in the given order) and ``draws`` is empty.
    """
    xN = np.atleast_2d(np.asarray(xN, dtype=float))
    count, n = xN.shape
    nsteps = schedule.N
    keep = list(range(nsteps + 1)) if record_steps is None else [int(k) for k in record_steps]
    if any(k < 0 or k > nsteps for k in keep):
        raise ValueError("record_steps outside 0..N")
    slot = {k: i for i, k in enumerate(keep)}
    points = np.empty((count, len(keep), n))
    draws = np.empty((count, nsteps if record_steps is None else 0, n))
    ok = np.ones(count, dtype=bool)
    pending = np.arange(count)
    tries = np.zeros(count, dtype=int)
    failures = 0
    attempts = 0
    max_it = 0
    bet = schedule.betas
    while pending.size:
        attempts += pending.size
        tries[pending] += 1
        cur = xN[pending].copy()
        alive = np.ones(pending.size, dtype=bool)
        if nsteps in slot:
            points[pending, slot[nsteps]] = cur
        for k in range(nsteps - 1, -1, -1):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            xa = cur[idx]
            s = score_fn(xa, float(schedule.score_time(k)))
            out = reverse_step(m, xa, bet[k], s, drift, rng, cfg)
            cur[idx] = out.y
            max_it = max(max_it, int(np.max(out.iterations, initial=0)))
            if record_steps is None:
                draws[pending[idx], k] = out.v
            alive[idx[~out.ok]] = False
            if k in slot:
                points[pending[idx], slot[k]] = out.y
        bad = pending[~alive]
        failures += bad.size
        if on_failure == "drop":
            ok[bad] = False
            break
        if np.any(tries[bad] >= max_attempts):
            raise AbortTooManyFailures(
                f"reverse path failed {max_attempts} times; reduce the step scale"
            )
        pending = bad
    return TrajectoryBatch(points, draws, ok, failures, attempts, max_it)


def _gaussian_log_norm(d, scale):
    return -0.5 * d * np.log(2.0 * np.pi * np.asarray(scale, dtype=float) ** 2)


#: Distance under which the solver's image of ``G(y)`` counts as ``y`` itself.
SUPPORT_TOL = 1e-4


def in_support(m, x, y, scale, drift_at_x, cfg: NewtonConfig = NewtonConfig()) -> np.ndarray:
    """Whether the deterministic projection from ``x`` can land on ``y``.

    The step map is a bijection only onto the points reached by Newton from
    ``c = 0``; elsewhere (the far hemisphere of a sphere, for instance) the
    transition density is zero. On spheres the test is ``<x, y> > 0``;
    otherwise the step with ``v = G(y)`` is replayed and compared with ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if m.kind == "sphere":
        return np.sum(x * y, axis=-1) > 0.0
    xb = np.atleast_2d(x)
    yb = np.broadcast_to(np.atleast_2d(y), xb.shape)
    bx = np.broadcast_to(np.atleast_2d(np.asarray(drift_at_x, dtype=float)), xb.shape)
    sc = np.broadcast_to(np.asarray(scale, dtype=float), xb.shape[:1])[:, None]
    gv = g_map(m, xb, yb, sc[:, 0], bx)
    res = newton_project(m, xb, xb + sc**2 * bx + sc * gv, cfg)
    hit = res.converged & (np.linalg.norm(res.point - yb, axis=-1) <= SUPPORT_TOL)
    return hit[0] if x.ndim == 1 else hit


def _assemble(m, base, other, scale, drift, support, cfg):
    gv = g_map(m, base, other, scale, drift)
    logdet = tangent_overlap_logdet(m, base, other)
    out = _gaussian_log_norm(m.d, scale) + logdet - 0.5 * np.sum(gv * gv, axis=-1)
    keep = np.isfinite(logdet)
    if support:
        keep = keep & in_support(m, base, other, scale, drift, cfg)
    return np.where(keep, out, LOG_ZERO)


def log_forward_transition(m, x_k, x_k1, sigma_k, drift_at_xk, support: bool = True,
                           cfg: NewtonConfig = NewtonConfig()) -> np.ndarray:
    """``log q(x^(k+1) | x^(k))``, with the no-solution probability taken as zero.

    Points outside the image of the step map, and orthogonal tangent spaces,
    give :data:`LOG_ZERO`. ``support=False`` skips the image test.
    """
    return _assemble(m, np.asarray(x_k, dtype=float), x_k1, sigma_k, drift_at_xk, support, cfg)


def log_reverse_transition(m, x_k, x_k1, beta_k1, score_at_xk1, drift_at_xk1, support: bool = True,
                           cfg: NewtonConfig = NewtonConfig()) -> np.ndarray:
    """``log p_theta(x^(k) | x^(k+1))`` with effective drift ``s - b`` at ``x^(k+1)``.

    The reverse step projects ``s - b`` onto the tangent space first, which
    leaves ``G`` unchanged, so the same formula applies with base ``x^(k+1)``.
    """
    xk1 = np.asarray(x_k1, dtype=float)
    eff = tangent_project(m, xk1, np.asarray(score_at_xk1, dtype=float) - np.asarray(drift_at_xk1, dtype=float))
    return _assemble(m, xk1, x_k, beta_k1, eff, support, cfg)


def write_trajectory_csv(path, points) -> None:
    """One row per step: ``step_index`` then the ``n`` coordinates."""
    points = np.asarray(points, dtype=float)
    n = points.shape[-1]
    header = ",".join(["step_index"] + [f"x{i}" for i in range(n)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for k, row in enumerate(points):
            fh.write(str(k) + "," + ",".join(repr(float(v)) for v in row) + "\n")
