"""Scikit-learn-style estimator facade.

`AmortizedRegistration.fit` trains the registration network on a list of
:class:`~morphreg.grid.RegistrationPair`; `predict` maps pairs to
displacement fields and `transform` returns the warped moving images.
`InstanceRegistration` performs per-pair optimization instead of learning.
Both expose ``get_params``/``set_params`` so they compose with scikit-learn
tooling (cloning, grid search over hyperparameters).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .grid import DisplacementField, GridImage, RegistrationPair
from .losses import LossWeights
from .net import NetConfig, NetParams, predict_displacement
from .optim import TrainConfig, optimize_instance, train
from .warp import warp_image


def _as_pairs(X) -> list[RegistrationPair]:
    pairs = []
    for item in X:
        if isinstance(item, RegistrationPair):
            pairs.append(item)
        elif isinstance(item, tuple) and len(item) == 2:
            f, m = item
            if not (isinstance(f, GridImage) and isinstance(m, GridImage)):
                raise TypeError("pair tuples must hold two GridImage values")
            pairs.append(RegistrationPair(f, m))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a registration pair")
    if not pairs:
        raise ValueError("X must contain at least one registration pair")
    return pairs


class AmortizedRegistration(BaseEstimator):
    """Learns one network that outputs a displacement field for any pair."""

    def __init__(
        self,
        encoder_filters=(16, 32, 32),
        decoder_filters=(32, 32, 32, 16),
        sim_kind="mse",
        lam=0.02,
        gamma=0.0,
        cc_window=9,
        iterations=2000,
        learning_rate=1e-4,
        seed=0,
    ):
        self.encoder_filters = encoder_filters
        self.decoder_filters = decoder_filters
        self.sim_kind = sim_kind
        self.lam = lam
        self.gamma = gamma
        self.cc_window = cc_window
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y=None, val_pairs=None):
        pairs = _as_pairs(X)
        config = NetConfig(tuple(self.encoder_filters), tuple(self.decoder_filters))
        cfg = TrainConfig(
            iterations=self.iterations,
            weights=LossWeights(self.lam, self.gamma, self.cc_window),
            sim_kind=self.sim_kind,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        result = train(config, pairs, cfg, val_pairs=val_pairs)
        self.params_: NetParams = result.best_params
        self.train_log_ = result.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict/transform")

    def predict(self, X) -> list[DisplacementField]:
        self._check_fitted()
        return [predict_displacement(self.params_, p.fixed, p.moving) for p in _as_pairs(X)]

    def transform(self, X) -> list[GridImage]:
        self._check_fitted()
        pairs = _as_pairs(X)
        return [warp_image(p.moving, u) for p, u in zip(pairs, self.predict(pairs))]


class InstanceRegistration(BaseEstimator):
    """Per-pair gradient descent on the displacement field itself."""

    def __init__(self, sim_kind="mse", lam=0.02, cc_window=9, iterations=100,
                 learning_rate=0.1):
        self.sim_kind = sim_kind
        self.lam = lam
        self.cc_window = cc_window
        self.iterations = iterations
        self.learning_rate = learning_rate

    def fit(self, X, y=None):
        # stateless between pairs; nothing to learn
        return self

    def predict(self, X, init: list[DisplacementField] | None = None) -> list[DisplacementField]:
        pairs = _as_pairs(X)
        if init is not None and len(init) != len(pairs):
            raise ValueError("init must provide one field per pair")
        weights = LossWeights(self.lam, 0.0, self.cc_window)
        out = []
        for i, p in enumerate(pairs):
            u, _ = optimize_instance(
                p.fixed,
                p.moving,
                init[i] if init is not None else None,
                weights,
                iterations=self.iterations,
                sim_kind=self.sim_kind,
                learning_rate=self.learning_rate,
            )
            out.append(u)
        return out

    def transform(self, X) -> list[GridImage]:
        pairs = _as_pairs(X)
        return [warp_image(p.moving, u) for p, u in zip(pairs, self.predict(pairs))]
