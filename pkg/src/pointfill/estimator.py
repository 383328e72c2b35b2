"""scikit-learn style wrapper around training and reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cloud import AugmentConfig
from .metrics import dice
from .model import ModelConfig, TrainConfig, load_model, make_pair, save_model, train
from .objective import ObjectiveConfig
from .pipeline import PipelineConfig, complete_case
from .validation import check_volume_pairs


class DefectCompleter(BaseEstimator):
    """Learn to reconstruct the missing part of a defective binary volume.

    ``fit(X, y)`` takes defective volumes and their ground-truth defects;
    ``predict(X)`` returns the reconstructed defect volumes.

    >>> est = DefectCompleter(steps=10)          # doctest: +SKIP
    >>> est.fit(defective, defects).predict(defective)  # doctest: +SKIP
    """

    def __init__(
        self,
        group_in: int = 1024,
        group_out: int = 512,
        n_queries: int = 8,
        fold_seed: int = 4,
        feat_dim: int = 128,
        steps: int = 2000,
        batch_size: int = 8,
        lr: float = 1e-3,
        objective: str = "dacd_knn",
        alpha: float = 0.1,
        k: int = 4,
        temperature: float = 1.0,
        max_crop_fraction: float = 0.0,
        max_angle: float = 0.0,
        max_shift: float = 0.0,
        refinements: int = 3,
        jitter_sigma: float = 0.005,
        seed: int = 0,
    ):
        self.group_in = group_in
        self.group_out = group_out
        self.n_queries = n_queries
        self.fold_seed = fold_seed
        self.feat_dim = feat_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.objective = objective
        self.alpha = alpha
        self.k = k
        self.temperature = temperature
        self.max_crop_fraction = max_crop_fraction
        self.max_angle = max_angle
        self.max_shift = max_shift
        self.refinements = refinements
        self.jitter_sigma = jitter_sigma
        self.seed = seed

    def _configs(self):
        mcfg = ModelConfig(
            group_in=self.group_in,
            group_out=self.group_out,
            n_queries=self.n_queries,
            fold_seed=self.fold_seed,
            feat_dim=self.feat_dim,
        )
        ocfg = ObjectiveConfig(self.objective, self.alpha, self.k, self.temperature)
        tcfg = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            objective=ocfg,
            augment=AugmentConfig(self.max_crop_fraction, self.max_angle, self.max_shift),
        )
        pcfg = PipelineConfig(
            refinements=self.refinements, jitter_sigma=self.jitter_sigma, seed=self.seed, objective=ocfg
        )
        return mcfg, tcfg, pcfg

    def fit(self, X, y, callback=None):
        X, y = check_volume_pairs(X, y)
        mcfg, tcfg, _ = self._configs()
        result = train([make_pair(a, b) for a, b in zip(X, y)], mcfg, tcfg, callback=callback)
        self.model_ = result.model
        self.loss_curve_ = list(result.losses)
        self.n_iter_ = result.step
        return self

    def complete(self, X) -> list:
        """Full :class:`ReconstructionResult` objects, one per volume."""
        check_is_fitted(self, "model_")
        X, _ = check_volume_pairs(X)
        _, _, pcfg = self._configs()
        return [complete_case(v, self.model_, pcfg, i) for i, v in enumerate(X)]

    def predict(self, X) -> list:
        return [r.defect_volume for r in self.complete(X)]

    def score(self, X, y) -> float:
        """Mean Dice coefficient of the predictions against ``y``."""
        X, y = check_volume_pairs(X, y)
        return float(np.mean([dice(p, t) for p, t in zip(self.predict(X), y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(self.model_, path, extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> DefectCompleter:
        model, _, extra = load_model(path)
        est = cls(**extra.get("estimator_params", {}))
        est.model_ = model
        return est
