"""Projection of ambient points back onto a level set.

``newton_project`` solves ``xi(x_mid + J(x) c) = 0`` for the multiplier ``c``
starting from ``c = 0``; failure to converge is reported in the result, not
raised, so that callers can discard and regenerate the trajectory.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import LevelSetManifold


class NoConvergenceError(RuntimeError):
    """Gradient-flow refinement ran out of time."""


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-6
    max_steps: int = 10

    def __post_init__(self):
        if not (1e-12 <= self.tol <= 1e-2):
            raise ValueError(f"newton tol must lie in [1e-12, 1e-2], got {self.tol}")
        if not (1 <= self.max_steps <= 100):
            raise ValueError(f"newton max_steps must lie in [1, 100], got {self.max_steps}")


@dataclass
class ProjectionResult:
    """Outcome of :func:`newton_project` (arrays carry the batch shape).

    Attributes:
        multiplier: Multiplier ``c`` of shape ``(..., n - d)``.
        converged: Whether the residual dropped below the tolerance.
        iterations: Newton updates performed.
        point: Projected point ``x_mid + J(x) c``.
    """

    multiplier: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    point: np.ndarray


def _solve_rows(a, rhs):
    """Batched ``a u = rhs``; rows with a singular or non-finite system get NaN."""
    try:
        u = np.linalg.solve(a, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        u = np.full_like(rhs, np.nan)
        for i in range(a.shape[0]):
            try:
                u[i] = np.linalg.solve(a[i], rhs[i])
            except np.linalg.LinAlgError:
                pass
    return u


def newton_project(m: LevelSetManifold, x, x_mid, cfg: NewtonConfig = NewtonConfig()) -> ProjectionResult:
    """Project ``x_mid`` onto ``m`` along the normal space at ``x``.

    Each iteration solves ``[J(y)^T J(x)] u = -xi(y)`` with
    ``y = x_mid + J(x) c`` and sets ``c <- c + u``.
    """
    x = np.asarray(x, dtype=float)
    x_mid = np.asarray(x_mid, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    mid = np.broadcast_to(np.atleast_2d(x_mid), xb.shape)
    batch = xb.shape[0]

    j0 = m.jacobian(xb)
    c = np.zeros((batch, m.codim))
    iters = np.zeros(batch, dtype=int)
    y = mid.copy()
    res = m.constraint(y)
    converged = np.linalg.norm(res, axis=-1) < cfg.tol
    failed = ~np.all(np.isfinite(res), axis=-1)
    active = ~(converged | failed)

    with np.errstate(over="ignore", invalid="ignore"):
        _newton_loop(m, j0, mid, y, c, res, iters, converged, failed, active, cfg)

    if single:
        return ProjectionResult(c[0], bool(converged[0]), int(iters[0]), y[0])
    return ProjectionResult(c, converged, iters, y)


def _newton_loop(m, j0, mid, y, c, res, iters, converged, failed, active, cfg):
    """Newton updates in place; divergent rows are marked failed."""
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ya = y[idx]
        lhs = np.swapaxes(m.jacobian(ya), -1, -2) @ j0[idx]
        u = _solve_rows(lhs, -res[idx])
        ok = np.all(np.isfinite(u), axis=-1)
        c[idx[ok]] += u[ok]
        iters[idx] += 1
        failed[idx[~ok]] = True
        step = idx[ok]
        y[step] = mid[step] + np.einsum("bij,bj->bi", j0[step], c[step])
        res[step] = m.constraint(y[step])
        r = np.linalg.norm(res[step], axis=-1)
        converged[step] = r < cfg.tol
        failed[step] |= ~np.isfinite(r)
        active[:] = ~(converged | failed)


def sphere_closed_form(x, step):
    """Exact projection onto the unit sphere of ``x + step`` along ``x``.

    Returns ``(y, ok)`` with ``y = sqrt(1 - |step|^2) x + step``; rows with
    ``|step| >= 1`` have no solution, ``ok`` is False there and ``y`` is NaN.
    """
    x = np.asarray(x, dtype=float)
    step = np.asarray(step, dtype=float)
    s2 = np.sum(step * step, axis=-1, keepdims=True)
    ok = s2 < 1.0
    with np.errstate(invalid="ignore"):
        y = np.sqrt(1.0 - s2) * x + step
    y = np.where(ok, y, np.nan)
    return y, ok[..., 0]


def refine_to_manifold(
    m: LevelSetManifold,
    x0,
    dt: float = 0.1,
    target_tol: float = 1e-5,
    max_time: float = 1e3,
) -> np.ndarray:
    """Pull near-manifold points onto ``m`` with the flow ``dx/dt = -J(x) xi(x)``.

    Explicit Euler; a step that would increase ``|xi|`` is rejected and the
    step size halved, so accepted residuals strictly decrease.

    Raises:
        NoConvergenceError: if some point needs more than ``max_time``.
    """
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    res = np.linalg.norm(m.constraint(x), axis=-1)
    h = np.full(x.shape[0], float(dt))
    t = np.zeros(x.shape[0])
    active = res >= target_tol
    while np.any(active):
        idx = np.flatnonzero(active)
        if np.any(t[idx] > max_time):
            raise NoConvergenceError(
                f"refinement exceeded max_time={max_time} with |xi| = {np.max(res[idx]):.3g}"
            )
        xa = x[idx]
        xi = m.constraint(xa)
        vel = -np.einsum("bij,bj->bi", m.jacobian(xa), xi)
        trial = xa + h[idx, None] * vel
        trial_res = np.linalg.norm(m.constraint(trial), axis=-1)
        accept = trial_res < res[idx]
        acc = idx[accept]
        rej = idx[~accept]
        x[acc] = trial[accept]
        res[acc] = trial_res[accept]
        t[acc] += h[acc]
        h[rej] *= 0.5
        t[rej] += h[rej]
        if np.any(h[rej] < 1e-14):
            raise NoConvergenceError("refinement step size underflowed")
        active = res >= target_tol
    return x[0] if single else x
