"""Scikit-learn style density estimator around the training and sampling code."""

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .chain import DriftSpec, NoiseSchedule, ZERO_DRIFT, simulate_reverse
from .datasets import Prior, uniform_prior
from .equivariance import EquivariantScore
from .evaluation import nll
from .geometry import LevelSetManifold
from .model import ScoreNet
from .rngs import role_rng
from .solver import NewtonConfig
from .trainer import TrainConfig, train


def check_on_manifold(m: LevelSetManifold, X, tol: Optional[float] = None, name: str = "X") -> np.ndarray:
    """Validate a 2-D float array of points on ``m``."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0)
    if X.shape[1] != m.n:
        raise ValueError(f"{name} has {X.shape[1]} columns, manifold ambient dimension is {m.n}")
    tol = 1e-5 if tol is None else tol
    if X.shape[0] and np.any(m.residual(X) > tol):
        worst = float(np.max(m.residual(X)))
        raise ValueError(f"{name} is off the manifold (largest residual {worst:.3g} > {tol})")
    return X


class RiemannianDDPM(BaseEstimator):
    """Diffusion density model on a level-set manifold.

    Args:
        manifold: Target manifold.
        hidden: Hidden-layer widths of the score MLP.
        T, N, gamma_min, gamma_max: Noise schedule.
        batch_size, epochs, refresh_every, lr, clip_norm, ema_decay: Training settings.
        newton_tol, newton_max_steps: Projection settings.
        drift: Forward drift; defaults to zero.
        prior: Prior for ``x^(N)``; defaults to the uniform law when one exists.
        equivariant_reference: Wrap the MLP into the rotation-equivariant score
            aligned to this reference cloud.
        nll_paths: Paths per point in :meth:`score_samples`.
        random_state: Master seed.
    """

    def __init__(
        self,
        manifold: Optional[LevelSetManifold] = None,
        hidden: Sequence[int] = (64, 64),
        T: float = 4.0,
        N: int = 400,
        gamma_min: float = 0.01,
        gamma_max: float = 1.0,
        batch_size: int = 128,
        epochs: int = 100,
        refresh_every: int = 1,
        lr: float = 5e-4,
        clip_norm: float = 10.0,
        ema_decay: float = 0.999,
        newton_tol: float = 1e-6,
        newton_max_steps: int = 10,
        drift: Optional[DriftSpec] = None,
        prior: Optional[Prior] = None,
        equivariant_reference=None,
        nll_paths: int = 50,
        val_paths: int = 10,
        val_every: Optional[int] = None,
        random_state: int = 0,
    ):
        self.manifold = manifold
        self.hidden = hidden
        self.T = T
        self.N = N
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.batch_size = batch_size
        self.epochs = epochs
        self.refresh_every = refresh_every
        self.lr = lr
        self.clip_norm = clip_norm
        self.ema_decay = ema_decay
        self.newton_tol = newton_tol
        self.newton_max_steps = newton_max_steps
        self.drift = drift
        self.prior = prior
        self.equivariant_reference = equivariant_reference
        self.nll_paths = nll_paths
        self.val_paths = val_paths
        self.val_every = val_every
        self.random_state = random_state

    # -- helpers -----------------------------------------------------------

    def _schedule(self):
        return NoiseSchedule(self.T, self.N, self.gamma_min, self.gamma_max)

    def _newton(self):
        return NewtonConfig(self.newton_tol, self.newton_max_steps)

    def _drift(self):
        return ZERO_DRIFT if self.drift is None else self.drift

    def _prior(self):
        if self.prior is not None:
            return self.prior
        return uniform_prior(self.manifold)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, refresh_every=self.refresh_every,
            schedule=self._schedule(), newton=self._newton(), seed=self.random_state,
            nll_paths_per_point=self.nll_paths, val_paths_per_point=self.val_paths, val_every=self.val_every,
            lr=self.lr, clip_norm=self.clip_norm, ema_decay=self.ema_decay,
        )

    def _build_model(self):
        net = ScoreNet(self.manifold.n, self.hidden, role_rng(self.random_state, "model.init"), self.ema_decay)
        if self.equivariant_reference is not None:
            return EquivariantScore(net, self.equivariant_reference)
        return net

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, X_val=None, out_dir=None, log=None):
        """Train on points ``X`` (rows on the manifold).

        ``X_val`` enables validation likelihoods and best-model tracking.
        """
        if self.manifold is None:
            raise ValueError("manifold must be set before fit")
        X = check_on_manifold(self.manifold, X)
        if X.shape[0] == 0:
            raise ValueError("X is empty")
        Xv = None if X_val is None else check_on_manifold(self.manifold, X_val, name="X_val")
        prior = self._prior()
        model = self._build_model()
        result = train(model, self.manifold, X, self.train_config(), self._drift(), Xv, prior.logpdf, out_dir,
                       log=log)
        self.model_ = result.model
        self.optimizer_ = result.optimizer
        self.metrics_ = result.metrics
        self.buffer_ = result.buffer
        self.n_features_in_ = X.shape[1]
        self.prior_ = prior
        return self

    def score_fn(self, use_ema: bool = True):
        """Callable ``(x, t_physical) -> score`` for the reverse chain."""
        check_is_fitted(self, "model_")
        T = self.T
        model = self.model_
        return lambda x, t: model.forward(x, np.asarray(t) / T, use_ema)

    def sample(self, n_samples: int = 1, random_state=None, return_steps=None, use_ema: bool = True):
        """Generate points by running the reverse chain from the prior.

        Args:
            return_steps: Step indices ``k`` to return; default only ``k = 0``.

        Returns:
            ``(n_samples, n)`` array, or ``(n_samples, len(return_steps), n)``
            when ``return_steps`` is given.
        """
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        rng = role_rng(seed, "sample")
        steps = [0] if return_steps is None else list(return_steps)
        if n_samples == 0:
            shape = (0, self.manifold.n) if return_steps is None else (0, len(steps), self.manifold.n)
            return np.empty(shape)
        xN = self.prior_.sample(int(n_samples), rng)
        tb = simulate_reverse(self.manifold, xN, self._schedule(), self.score_fn(use_ema), self._drift(), rng,
                              self._newton(), record_steps=steps)
        self.last_sample_failures_ = (tb.failures, tb.attempts)
        return tb.points[:, 0] if return_steps is None else tb.points

    def score_samples(self, X, random_state=None, paths_per_point=None):
        """Estimated log-likelihood of each row of ``X``."""
        check_is_fitted(self, "model_")
        X = check_on_manifold(self.manifold, X)
        if self.prior_.logpdf is None:
            raise ValueError("prior has no density; likelihoods are unavailable")
        seed = self.random_state if random_state is None else random_state
        est = nll(self.manifold, self.model_, X, self._schedule(), self._drift(), self.prior_.logpdf,
                  paths_per_point or self.nll_paths, role_rng(seed, "nll"), self._newton(), use_ema=True)
        self.last_nll_ = est
        return -est.per_point

    def score(self, X, y=None):
        """Mean log-likelihood over the rows of ``X``."""
        vals = self.score_samples(X)
        return float(np.nanmean(vals))
