"""Variational training of the score network on stored forward paths.

Each training point owns one forward path in a :class:`TrajectoryBuffer`.
An epoch shuffles the points, walks over mini-batches, and minimizes

    loss = 1/(2B) sum_i sum_k |G_{x^(k+1)}^(beta_{k+1})(x^(k); s_theta - b)|^2,

refreshing the paths every ``refresh_every`` epochs.
"""

import csv
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .chain import (
    DriftSpec,
    NoiseSchedule,
    TrajectoryBatch,
    ZERO_DRIFT,
    drift_eval,
    simulate_forward,
)
from .geometry import LevelSetManifold, tangent_project
from .model import AdamState, adam_step, ema_update, save_checkpoint
from .rngs import role_rng
from .solver import NewtonConfig

METRICS_COLUMNS = ("epoch", "train_loss", "val_nll", "ema_flag", "wall_seconds")


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Attributes:
        batch_size: Mini-batch size ``B``.
        epochs: Number of epochs.
        refresh_every: Paths are regenerated at epochs divisible by this.
        schedule: Noise schedule shared by both chains.
        newton: Projection settings.
        seed: Master seed; all streams derive from it.
        validation_fraction: Fraction of points held out when ``fit`` splits.
        nll_paths_per_point: Paths per point for test likelihoods.
        val_paths_per_point: Paths per point for validation likelihoods.
        val_every: Validation cadence in epochs; ``None`` means ``refresh_every``.
        lr, clip_norm, ema_decay: Optimizer settings.
        max_attempts: Retry bound for failed paths.
        wall_clock: Record wall time in the metrics file (breaks bit-identity).
        max_rows: Rows of ``(x, t)`` pushed through the network at once.
    """

    batch_size: int = 128
    epochs: int = 100
    refresh_every: int = 1
    schedule: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(4.0, 400, 0.01, 1.0))
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    seed: int = 0
    validation_fraction: float = 0.1
    nll_paths_per_point: int = 50
    val_paths_per_point: int = 10
    val_every: Optional[int] = None
    lr: float = 5e-4
    clip_norm: float = 10.0
    ema_decay: float = 0.999
    max_attempts: int = 100
    wall_clock: bool = False
    max_rows: int = 1024

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.nll_paths_per_point < 1 or self.val_paths_per_point < 1:
            raise ValueError("paths per point must be at least 1")
        if self.val_every is not None and self.val_every < 1:
            raise ValueError("val_every must be at least 1")


@dataclass
class TrajectoryBuffer:
    """One forward path per training point.

    Attributes:
        data: ``(M, n)`` training points; ``paths.points[:, 0]`` equals them.
        paths: Stored paths.
        drift_values: ``b`` at every stored point, or ``None`` for zero drift.
        epoch_stamp: Epoch of the last refresh.
        failures, attempts: Cumulative discarded / simulated path counts.
    """

    data: np.ndarray
    paths: Optional[TrajectoryBatch] = None
    drift_values: Optional[np.ndarray] = None
    epoch_stamp: int = -1
    failures: int = 0
    attempts: int = 0

    def refresh(self, m, schedule, drift, rng, cfg: NewtonConfig, epoch: int = 0, max_attempts: int = 100):
        self.paths = simulate_forward(m, self.data, schedule, drift, rng, cfg, "regenerate", max_attempts)
        self.paths.points[:, 0] = self.data
        self.drift_values = None if drift.is_zero else drift_eval(drift, self.paths.points)
        self.epoch_stamp = epoch
        self.failures += self.paths.failures
        self.attempts += self.paths.attempts
        return self

    def __len__(self):
        return self.data.shape[0]


def reverse_g(m, points, schedule, scores, drift_values=None):
    """``G`` of the reverse transitions along paths.

    Args:
        points: ``(B, N + 1, n)`` paths.
        scores: ``(B, N, n)`` network output at ``points[:, 1:]``.
        drift_values: ``(B, N + 1, n)`` drift along the paths or ``None``.

    Returns:
        ``(B, N, n)`` array, tangent at ``points[:, 1:]``.
    """
    x1 = points[:, 1:]
    x0 = points[:, :-1]
    beta = schedule.betas[None, :, None]
    eff = scores if drift_values is None else scores - drift_values[:, 1:]
    return tangent_project(m, x1, x0 - x1 - beta**2 * eff) / beta


def _score_inputs(points, schedule):
    count, nsteps = points.shape[0], schedule.N
    x1 = points[:, 1:].reshape(count * nsteps, -1)
    t = np.tile(schedule.score_time(np.arange(nsteps)) / schedule.T, count)
    return x1, t


def batch_loss(model, m, paths, schedule, drift_values=None, use_ema=False, with_grad=True, max_rows=1024):
    """Loss and parameter gradients on a batch of paths.

    The gradient of the loss with respect to the network output at
    ``(x^(k+1), t_{k+1})`` is ``-beta_{k+1} G / B`` because ``G`` is already
    tangent there. Every reverse transition is an independent row, so the
    work runs over row chunks of ``max_rows`` (small chunks stay in cache).

    Args:
        model: Score model with ``forward``/``backward``.
        paths: ``(B, N + 1, n)`` array of paths.

    Returns:
        Tuple ``(loss, grads)``; ``grads`` is ``None`` when ``with_grad`` is False.
    """
    paths = np.asarray(paths, dtype=float)
    count, nsteps1, n = paths.shape
    nsteps = nsteps1 - 1
    if nsteps == 0:
        return 0.0, None
    x1, t = _score_inputs(paths, schedule)
    x0 = paths[:, :-1].reshape(-1, n)
    beta = np.tile(schedule.betas, count)[:, None]
    b1 = None if drift_values is None else drift_values[:, 1:].reshape(-1, n)
    total = 0.0
    grads = None
    for lo in range(0, x1.shape[0], max_rows):
        sl = slice(lo, lo + max_rows)
        xa, bt = x1[sl], beta[sl]
        if with_grad:
            s, cache = model.forward(xa, t[sl], use_ema, return_cache=True)
        else:
            s = model.forward(xa, t[sl], use_ema)
        eff = s if b1 is None else s - b1[sl]
        gv = tangent_project(m, xa, x0[sl] - xa - bt**2 * eff) / bt
        total += 0.5 * float(np.sum(gv * gv))
        if with_grad:
            part = model.backward(cache, -(bt / count) * gv)
            if grads is None:
                grads = part
            else:
                for a, b in zip(grads, part):
                    a += b
    return total / count, grads


def path_bound_terms(model, m, paths: TrajectoryBatch, schedule, drift_values, prior_logdensity, use_ema=True,
                     max_rows=65536):
    """Per-path reverse loss ``1/2 sum |G|^2`` and constant term ``-log p(x^N) - 1/2 sum |v|^2``."""
    pts = paths.points
    count, nsteps = pts.shape[0], schedule.N
    loss = np.zeros(count)
    chunk = max(1, max_rows // max(nsteps, 1))
    for lo in range(0, count, chunk):
        sub = pts[lo:lo + chunk]
        if nsteps == 0:
            break
        x1, t = _score_inputs(sub, schedule)
        s = model.forward(x1, t, use_ema).reshape(sub.shape[0], nsteps, -1)
        dv = None if drift_values is None else drift_values[lo:lo + chunk]
        gv = reverse_g(m, sub, schedule, s, dv)
        loss[lo:lo + chunk] = 0.5 * np.sum(gv * gv, axis=(1, 2))
    const = -(prior_logdensity(pts[:, -1]) + 0.5 * np.sum(paths.draws**2, axis=(1, 2)))
    return loss, const


def variational_constant(buffer: TrajectoryBuffer, schedule: NoiseSchedule, prior_logdensity: Callable):
    """Monte Carlo estimate of ``C = -E[log p(x^N) + 1/2 sum_k |v^(k)|^2]``.

    Returns:
        Tuple ``(estimate, standard_error)`` over the stored paths.
    """
    paths = buffer.paths
    terms = -(prior_logdensity(paths.points[:, -1]) + 0.5 * np.sum(paths.draws**2, axis=(1, 2)))
    se = float(np.std(terms, ddof=1) / np.sqrt(terms.size)) if terms.size > 1 else 0.0
    return float(np.mean(terms)), se


@dataclass
class TrainResult:
    model: object
    optimizer: AdamState
    buffer: TrajectoryBuffer
    metrics: List[dict]
    best_val_nll: float = float("nan")
    best_epoch: int = -1


def _base_net(model):
    return getattr(model, "net", model)


def train(
    model,
    m: LevelSetManifold,
    train_points,
    cfg: TrainConfig,
    drift: DriftSpec = ZERO_DRIFT,
    val_points=None,
    prior_logdensity: Optional[Callable] = None,
    out_dir: Optional[str] = None,
    optimizer: Optional[AdamState] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the training loop.

    Paths are (re)generated at every epoch ``e`` (0-based) with
    ``e % refresh_every == 0``. Validation runs every ``val_every`` epochs on
    ``val_points`` with EMA weights when a prior density is available; the
    best model is kept as ``ckpt_best.txt`` and the final one as
    ``ckpt_last.txt`` in ``out_dir``, next to ``metrics.csv``.

    Raises:
        AbortTooManyFailures: if path regeneration exceeds its retry bound.
    """
    from .evaluation import nll

    data = np.atleast_2d(np.asarray(train_points, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("no training points")
    net = _base_net(model)
    net.ema_decay = cfg.ema_decay
    opt = optimizer if optimizer is not None else AdamState.for_net(net, lr=cfg.lr, clip_norm=cfg.clip_norm)
    schedule = cfg.schedule
    rng_paths = role_rng(cfg.seed, "train.paths")
    rng_perm = role_rng(cfg.seed, "train.perm")
    val_every = cfg.val_every or cfg.refresh_every
    do_val = val_points is not None and prior_logdensity is not None and len(val_points) > 0
    buffer = TrajectoryBuffer(data)
    metrics = []
    best = float("inf")
    best_epoch = -1
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
    start = time.perf_counter()
    batch = min(cfg.batch_size, len(data))
    nbatches = max(1, len(data) // batch)
    try:
        for epoch in range(cfg.epochs):
            if epoch % cfg.refresh_every == 0:
                buffer.refresh(m, schedule, drift, rng_paths, cfg.newton, epoch, cfg.max_attempts)
            perm = rng_perm.permutation(len(data))
            losses = []
            for j in range(nbatches):
                idx = perm[j * batch:(j + 1) * batch]
                dv = None if buffer.drift_values is None else buffer.drift_values[idx]
                loss, grads = batch_loss(model, m, buffer.paths.points[idx], schedule, dv, max_rows=cfg.max_rows)
                adam_step(opt, net, grads)
                ema_update(net)
                losses.append(loss)
            row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_nll": "", "ema_flag": 0}
            if do_val and ((epoch + 1) % val_every == 0 or epoch + 1 == cfg.epochs):
                est = nll(m, model, val_points, schedule, drift, prior_logdensity, cfg.val_paths_per_point,
                          role_rng(cfg.seed, "train.val", epoch), cfg.newton, use_ema=True)
                row["val_nll"] = est.mean_nll
                row["ema_flag"] = 1
                if est.mean_nll < best:
                    best, best_epoch = est.mean_nll, epoch + 1
                    if out_dir is not None:
                        save_checkpoint(os.path.join(out_dir, "ckpt_best.txt"), net, opt, {"epoch": epoch + 1})
            wall = time.perf_counter() - start
            row["wall_seconds"] = wall if cfg.wall_clock else ""
            metrics.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
                fh.flush()
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {row['train_loss']:.6g}"
                    + (f" val_nll {row['val_nll']:.6g}" if row["val_nll"] != "" else ""))
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt_last.txt"), net, opt, {"epoch": cfg.epochs})
        if best_epoch < 0:
            save_checkpoint(os.path.join(out_dir, "ckpt_best.txt"), net, opt, {"epoch": cfg.epochs})
    return TrainResult(model, opt, buffer, metrics, best if best_epoch > 0 else float("nan"), best_epoch)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
