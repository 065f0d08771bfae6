"""scikit-learn style wrapper around the three-stage trainer.

``X`` is a user x item matrix (dense or scipy sparse); any positive entry
counts as an interaction.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .actor import ActorConfig
from .critic import FEATURE_NAMES
from .data import InteractionMatrix, SplitSpec, l2_normalize_rows
from .metrics import MetricSpec, batch_scores
from .trainer import Trainer, TrainSchedule


def _binary_csr(X):
    X = check_array(X, accept_sparse="csr", dtype=np.float64)
    if sp.issparse(X):
        X = X.copy()
        X.data = (X.data > 0).astype(np.float64)
        X.eliminate_zeros()
        return X
    return sp.csr_matrix((X > 0).astype(np.float64))


class RaCTRecommender(BaseEstimator):
    """VAE recommender trained with a learned ranking critic.

    ``predict`` returns item scores for each row of observed interactions;
    ``score`` is mean NDCG@``cutoff`` of those scores against held-out items.
    """

    def __init__(
        self,
        preset="vae",
        latent_dim=200,
        hidden_dim=600,
        stage1_epochs=40,
        stage2_epochs=10,
        stage3_epochs=15,
        anneal_epochs=25,
        beta_max=0.2,
        batch_size=250,
        cutoff=20,
        critic_features=FEATURE_NAMES,
        n_val_users=400,
        lr_actor_ac=3e-5,
        random_state=1,
    ):
        self.preset = preset
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage3_epochs = stage3_epochs
        self.anneal_epochs = anneal_epochs
        self.beta_max = beta_max
        self.batch_size = batch_size
        self.cutoff = cutoff
        self.critic_features = critic_features
        self.n_val_users = n_val_users
        self.lr_actor_ac = lr_actor_ac
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _binary_csr(X)
        matrix = InteractionMatrix.from_csr(X)
        if self.n_val_users >= matrix.n_users:
            raise ValueError(f"n_val_users={self.n_val_users} leaves no training users (n_users={matrix.n_users})")
        overrides = {} if self.preset == "dae" else {"latent_dim": self.latent_dim, "hidden_dim": self.hidden_dim}
        config = ActorConfig.preset(self.preset, matrix.n_items, **overrides)
        schedule = TrainSchedule(
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            stage3_epochs=self.stage3_epochs,
            anneal_epochs=min(self.anneal_epochs, self.stage1_epochs),
            fix_epochs=self.stage1_epochs - min(self.anneal_epochs, self.stage1_epochs),
            beta_max=self.beta_max,
            batch_size=self.batch_size,
            seed=self.random_state,
            critic_metric=MetricSpec("ndcg", self.cutoff),
            lr_actor_ac=self.lr_actor_ac,
        )
        split = SplitSpec(self.n_val_users, 0, self.random_state)
        self.trainer_ = Trainer(matrix, config, schedule, split, tuple(self.critic_features)).fit()
        self.actor_ = self.trainer_.best_actor
        self.critic_ = self.trainer_.best_critic
        self.n_features_in_ = matrix.n_items
        self.history_ = self.trainer_.log.rows
        return self

    def _observed(self, X):
        check_is_fitted(self, "actor_")
        X = _binary_csr(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} items, the model was fit on {self.n_features_in_}")
        return X.toarray()

    def predict(self, X):
        """Item scores, shape ``(n_users, n_items)``."""
        observed = self._observed(X)
        return self.actor_.predict(observed)

    def transform(self, X):
        """Posterior mean of the latent code, shape ``(n_users, latent_dim)``."""
        inputs = l2_normalize_rows(self._observed(X))
        mu, _, _ = self.actor_.encode(inputs)
        return mu

    def score(self, X, y):
        """Mean NDCG@``cutoff``: rank unobserved items of ``X`` against targets ``y``."""
        observed = self._observed(X)
        target = _binary_csr(y).toarray()
        scores = batch_scores(self.actor_.predict(observed), target, observed, [self.cutoff], ("ndcg",))
        return float(np.nanmean(scores[("ndcg", self.cutoff)]))
