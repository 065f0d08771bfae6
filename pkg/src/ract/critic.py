"""Feature-based critic: a small MLP that predicts a ranking score from
``[data_loss, |heldout|, |observed|]``.

The count features are constants with respect to the actor, so the only
gradient the actor receives is through the data-loss (NLL) feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import batch_scores
from .nn import (
    AffineLayer,
    BatchNormState,
    batch_norm_backward,
    batch_norm_forward,
    init_affine,
    mlp_backward,
    mlp_forward,
)

FEATURE_NAMES = ("nll", "n_heldout", "n_observed")
HIDDEN = (100, 100, 10)


@dataclass(frozen=True)
class CriticFeatures:
    nll: float
    n_heldout: int
    n_observed: int

    def as_array(self):
        return np.array([self.nll, self.n_heldout, self.n_observed], dtype=np.float64)


def extract_features(x, mask, nll_value):
    """Features for one row, or ``None`` when nothing is held out."""
    x = np.asarray(x) > 0
    b = np.asarray(mask) > 0
    n_heldout = int(np.sum(x & ~b))
    if n_heldout == 0:
        return None
    return CriticFeatures(nll_value, n_heldout, int(np.sum(x & b)))


def feature_matrix(X, mask, nll):
    """Batch features ``(B, 3)`` and a boolean keep-vector (``|H0| >= 1``)."""
    x = np.asarray(X) > 0
    b = np.asarray(mask) > 0
    n_heldout = (x & ~b).sum(axis=1)
    n_observed = (x & b).sum(axis=1)
    H = np.column_stack([np.asarray(nll, dtype=np.float64), n_heldout, n_observed]).astype(np.float64)
    return H, n_heldout > 0


def oracle_targets_for_batch(scores, X, mask, spec):
    """Exact metric per row, ranking with the observed (mask = 1) items removed."""
    out = batch_scores(scores, X, mask, [spec.cutoff], kinds=(spec.kind,))
    return out[(spec.kind, spec.cutoff)]


def critic_loss(y_hat, y):
    """Mean squared error and its gradient w.r.t. ``y_hat``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    resid = y_hat - np.asarray(y, dtype=np.float64)
    return float(np.mean(resid * resid)), 2.0 * resid / resid.size


@dataclass
class CriticCache:
    bn: object
    mlp: list


class Critic:
    """``features -> BN -> 100 ReLU -> 100 ReLU -> 10 ReLU -> 1 sigmoid``.

    ``features`` selects which of ``FEATURE_NAMES`` are fed in; the NLL
    feature is always required since it carries the actor gradient.
    """

    def __init__(self, rng=None, features=FEATURE_NAMES, params=None, bn=None):
        features = tuple(features)
        if "nll" not in features or not set(features) <= set(FEATURE_NAMES):
            raise ValueError(f"critic features must include 'nll' and be drawn from {FEATURE_NAMES}")
        self.features = tuple(f for f in FEATURE_NAMES if f in features)
        self._cols = [FEATURE_NAMES.index(f) for f in self.features]
        dims = [len(self.features), *HIDDEN, 1]
        self.activations = ["relu"] * len(HIDDEN) + ["sigmoid"]
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        else:
            self.params = {}
            for k in range(len(dims) - 1):
                layer = init_affine(dims[k], dims[k + 1], rng)
                self.params[f"critic.{k}.weight"] = layer.weight
                self.params[f"critic.{k}.bias"] = layer.bias
            self.params["bn.gamma"] = np.ones(len(self.features))
            self.params["bn.beta"] = np.zeros(len(self.features))
        self.bn = bn if bn is not None else BatchNormState.create(len(self.features))
        self.n_layers = len(dims) - 1

    def _layers(self):
        return [
            AffineLayer(self.params[f"critic.{k}.weight"], self.params[f"critic.{k}.bias"])
            for k in range(self.n_layers)
        ]

    def forward(self, H, mode="train", update_running=True):
        """Return ``(y_hat, cache)`` for full 3-column feature rows ``H``."""
        H = np.asarray(H, dtype=np.float64)[:, self._cols]
        self.bn.gamma = self.params["bn.gamma"]
        self.bn.beta_shift = self.params["bn.beta"]
        normed, bn_cache = batch_norm_forward(H, self.bn, mode, update_running)
        out, mlp_cache = mlp_forward(self._layers(), self.activations, normed)
        return out[:, 0], CriticCache(bn_cache, mlp_cache)

    def backward(self, cache, grad_y):
        """Return ``(grad_H, grads)`` where ``grad_H`` has all three feature columns."""
        g = np.asarray(grad_y, dtype=np.float64)[:, None]
        g_norm, layer_grads = mlp_backward(self._layers(), self.activations, cache.mlp, g)
        g_in, g_gamma, g_beta = batch_norm_backward(cache.bn, g_norm)
        grads = {"bn.gamma": g_gamma, "bn.beta": g_beta}
        for k, (gw, gb) in enumerate(layer_grads):
            grads[f"critic.{k}.weight"], grads[f"critic.{k}.bias"] = gw, gb
        grad_H = np.zeros((g_in.shape[0], len(FEATURE_NAMES)))
        grad_H[:, self._cols] = g_in
        return grad_H, grads

    def predict(self, H):
        return self.forward(H, mode="eval")[0]

    def fit_step(self, H, y):
        """Loss and parameter gradients of the MSE objective in train mode."""
        y_hat, cache = self.forward(H, mode="train")
        loss, g = critic_loss(y_hat, y)
        _, grads = self.backward(cache, g)
        return loss, grads

    def copy(self):
        bn = BatchNormState(
            self.bn.gamma.copy(), self.bn.beta_shift.copy(), self.bn.running_mean.copy(),
            self.bn.running_var.copy(), self.bn.momentum, self.bn.epsilon, self.bn.initialized,
        )
        return Critic(features=self.features, params=self.params, bn=bn)


def actor_objective(critic, H, mode="train"):
    """Estimated ranking score ``L_A = mean(critic(H))`` and ``dL_A/d nll`` per row.

    Batch-norm runs on batch statistics without touching the running averages,
    so the critic is left exactly as it was. Count features get no gradient.
    """
    y_hat, cache = critic.forward(H, mode=mode, update_running=False)
    n = y_hat.size
    grad_H, _ = critic.backward(cache, np.full(n, 1.0 / n))
    return float(np.mean(y_hat)), grad_H[:, 0].copy()
