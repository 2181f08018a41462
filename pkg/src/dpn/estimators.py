"""scikit-learn style wrappers: fit a representation on a Dataset, transform
images into embeddings, and score observation/goal pairs with the Huber metric."""

from __future__ import annotations

from dataclasses import asdict as _asdict

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ConfigError, TrainConfig, _from_dict
from .envs import Dataset
from .metric import METRIC_KINDS, GoalMetric
from .training import train, train_baseline


class GoalEmbedding(BaseEstimator, TransformerMixin):
    """Image embedding used as a goal metric.

    Parameters
    ----------
    kind : {"dpn", "inverse", "vae", "upn", "pixel"}
        Representation to learn. ``"pixel"`` needs no training.
    train_config : TrainConfig, dict or None
        Training hyperparameters; ``None`` uses the desk defaults.
    iterations : int or None
        Overrides ``train_config.iterations`` when given.
    random_state : int or None
        Overrides ``train_config.seed`` when given.
    delta : float
        Huber threshold of the metric.

    Attributes
    ----------
    model_ : trained network (absent for ``"pixel"``)
    metric_ : GoalMetric
    history_ : list of per-iteration loss dicts
    obs_shape_ : (C, H, W) seen during ``fit``
    """

    def __init__(self, kind="dpn", train_config=None, iterations=None, random_state=0,
                 delta=0.85):
        self.kind = kind
        self.train_config = train_config
        self.iterations = iterations
        self.random_state = random_state
        self.delta = delta

    def _resolved_config(self) -> TrainConfig:
        base = self.train_config
        if base is None:
            data = {}
        elif isinstance(base, TrainConfig):
            data = _asdict(base)
        elif isinstance(base, dict):
            data = dict(base)
        else:
            raise TypeError("train_config must be a TrainConfig, a dict or None")
        if self.iterations is not None:
            data["iterations"] = self.iterations
        if self.random_state is not None:
            data["seed"] = int(self.random_state)
        defaults = _asdict(TrainConfig())
        defaults.update(data)
        if isinstance(defaults.get("arch"), dict):
            defaults["arch"] = {**_asdict(TrainConfig().arch), **defaults["arch"]}
        return _from_dict(TrainConfig, defaults, "train_config")

    def fit(self, X: Dataset, y=None):
        if self.kind not in METRIC_KINDS + ("upn",):
            raise ValueError(f"unknown kind {self.kind!r}")
        if not isinstance(X, Dataset):
            raise TypeError(f"fit expects a dpn.envs.Dataset, got {type(X).__name__}")
        try:
            cfg = self._resolved_config()
        except ConfigError as err:
            raise ValueError(str(err)) from None
        self.obs_shape_ = tuple(X.obs_shape)
        if self.kind == "pixel":
            self.model_, self.history_ = None, []
        elif self.kind == "dpn":
            self.model_, self.history_ = train(X, cfg)
        else:
            self.model_, self.history_ = train_baseline(self.kind, X, cfg)
        self.metric_ = GoalMetric(self.kind, self.model_, self.delta)
        return self

    def _check_obs(self, X) -> np.ndarray:
        check_is_fitted(self, "metric_")
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != self.obs_shape_:
            raise ValueError(f"expected observations of shape (N, {', '.join(map(str, self.obs_shape_))}), "
                             f"got {X.shape}")
        return X

    def transform(self, X) -> np.ndarray:
        """Embeddings ``[N, e]`` of observations ``[N, C, H, W]``."""
        X = self._check_obs(X)
        return self.metric_.embed(X)

    def score_pairs(self, X, goals) -> np.ndarray:
        """Metric loss between each observation and its goal (lower is closer)."""
        X, goals = self._check_obs(X), self._check_obs(goals)
        if len(goals) not in (1, len(X)):
            raise ValueError(f"{len(goals)} goals for {len(X)} observations")
        return self.metric_.loss_from_embeddings(self.metric_.embed(X), self.metric_.embed(goals))

    def reward(self, X, goals) -> np.ndarray:
        return np.array([self.metric_.reward_from_loss(float(v)) for v in self.score_pairs(X, goals)])
