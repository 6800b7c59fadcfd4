"""Scikit-learn style estimator facade over training and sampling.

DiffusionGenerator follows the fit/sample convention of sklearn's density
estimators (KernelDensity, GaussianMixture): fit on a list of physics
samples, then draw new ones.  get_params/set_params/clone compose with the
usual sklearn tooling.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from physgen.constraints import ConstraintSpec
from physgen.data import FieldSample, TrajectorySample
from physgen.diffusion import build_schedule
from physgen.train import (
    PARTICLE_FAMILIES,
    TrainConfig,
    dataset_arrays,
    matching_loss,
    rebuild_model,
    sample_from_checkpoint,
    train,
)
from physgen.validation import check_conditions, check_dataset, check_family

__all__ = ["DiffusionGenerator"]


class DiffusionGenerator(BaseEstimator):
    """Physics-prior diffusion generator with an sklearn-style interface.

    Parameters mirror TrainConfig; `constraint`/`case`/`penalty_weight`
    switch on a feasibility penalty, `augment` lists group augmentations
    for particle families.
    """

    def __init__(self, family="advection", predictor="auto", constraint=None,
                 case=None, penalty_weight=0.1, epochs=60, batch_size=64,
                 hidden=64, layers=2, msg_dim=16, channels=32, blocks=3,
                 augment=(), sampler="dpm1", sampler_steps=20,
                 predict_frames=0, seed=0):
        self.family = family
        self.predictor = predictor
        self.constraint = constraint
        self.case = case
        self.penalty_weight = penalty_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.hidden = hidden
        self.layers = layers
        self.msg_dim = msg_dim
        self.channels = channels
        self.blocks = blocks
        self.augment = augment
        self.sampler = sampler
        self.sampler_steps = sampler_steps
        self.predict_frames = predict_frames
        self.seed = seed

    def _train_config(self):
        spec = None
        if self.constraint is not None:
            if self.case is None:
                raise ValueError("constraint set but case is None")
            spec = ConstraintSpec(self.constraint, self.case, weight=self.penalty_weight)
        return TrainConfig(
            family=check_family(self.family),
            predictor=self.predictor,
            constraint=spec,
            batch_size=self.batch_size,
            epochs=self.epochs,
            hidden=self.hidden,
            layers=self.layers,
            msg_dim=self.msg_dim,
            channels=self.channels,
            blocks=self.blocks,
            augment=tuple(self.augment),
            predict_frames=self.predict_frames,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        """X: list of TrajectorySample or FieldSample for `family`."""
        X = check_dataset(self.family, X)
        self.checkpoint_ = train(self._train_config(), X)
        self.n_features_in_ = int(np.prod(self.checkpoint_.meta["sample_shape"]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("call fit before sampling")

    def sample(self, n, conditions=None, seed=None):
        """Draw n generated samples (physical units, raw arrays)."""
        self._check_fitted()
        conds = check_conditions(self.family, conditions, n, self.predict_frames)
        return sample_from_checkpoint(
            self.checkpoint_, n, sampler=self.sampler, steps=self.sampler_steps,
            conditions=conds, seed=self.seed if seed is None else seed,
        )

    def predict(self, conditions, seed=None):
        """Conditional generation: one sample per condition row."""
        self._check_fitted()
        conditions = np.asarray(conditions, dtype=np.float64)
        return self.sample(conditions.shape[0], conditions=conditions, seed=seed)

    def score(self, X, y=None, seed=0):
        """Negative matching loss on held-out samples (higher is better)."""
        self._check_fitted()
        X = check_dataset(self.family, X)
        config = TrainConfig.from_dict(self.checkpoint_.config)
        arrays = dataset_arrays(self.family, X, config.predict_frames)
        sched = build_schedule(
            config.schedule_steps, config.schedule_lo, config.schedule_hi
        )
        model = rebuild_model(self.checkpoint_)
        rng = np.random.default_rng(seed)
        x0 = arrays["x0"] * self.checkpoint_.data_scale
        cond = arrays.get("condition")
        loss = matching_loss(model, x0, sched, rng, condition=cond)
        return -float(loss.item())

    def loss_curves(self):
        self._check_fitted()
        return list(self.checkpoint_.loss_curves)
