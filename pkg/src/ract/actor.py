"""Prediction models (actors): the multinomial VAE and its variants.

All variants share one encoder/decoder skeleton built from affine layers:

* ``vae``           M -> 600 tanh -> 2K (mu, log-variance), K -> 600 tanh -> M
* ``vae_gaussian``  same network, Gaussian likelihood on raw decoder output
* ``vae_beta0``     same network, posterior replaced by its mean, l2 penalty
* ``vae_linear``    no hidden layers
* ``dae``           M -> 600 tanh -> M, deterministic, l2 penalty
* ``mf``            linear encoder/decoder, Gaussian likelihood, l2 penalty

Ranking losses (BPR, WARP) can replace the likelihood term for any of them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import l2_normalize_rows
from .nn import (
    AffineLayer,
    activation_forward,
    glorot_init,
    log_softmax,
    mlp_backward,
    mlp_forward,
    sigmoid,
    softmax_stable,
)

LIKELIHOODS = ("multinomial", "gaussian")
LOSS_KINDS = ("mle", "bpr", "warp")


@dataclass(frozen=True)
class ActorConfig:
    n_items: int
    latent_dim: int = 200
    hidden_dim: int = 600
    likelihood: str = "multinomial"
    variational: bool = True
    linear: bool = False
    latent_activation: str = "linear"
    l2_weight: float = 0.01
    loss_kind: str = "mle"
    warp_mode: str = "exact"
    n_negatives: int = 0  # 0 = every negative item in BPR

    def __post_init__(self):
        if self.n_items < 1 or self.latent_dim < 1 or self.hidden_dim < 0:
            raise ValueError("n_items and latent_dim must be >= 1, hidden_dim >= 0")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.warp_mode not in ("exact", "sampled"):
            raise ValueError("warp_mode must be 'exact' or 'sampled'")

    @classmethod
    def preset(cls, name, n_items, **overrides):
        presets = {
            "vae": {},
            "vae_gaussian": {"likelihood": "gaussian"},
            "vae_beta0": {"variational": False},
            "vae_linear": {"linear": True},
            "dae": {
                "variational": False,
                "latent_dim": 600,
                "hidden_dim": 0,
                "latent_activation": "tanh",
            },
            "mf": {"variational": False, "linear": True, "likelihood": "gaussian"},
        }
        if name not in presets:
            raise ValueError(f"unknown actor preset {name!r}; choose from {sorted(presets)}")
        return cls(n_items=n_items, **{**presets[name], **overrides})

    @property
    def hidden_layers(self):
        return [] if self.linear or self.hidden_dim == 0 else [self.hidden_dim]

    @property
    def scores_are_probabilities(self):
        return self.loss_kind == "mle" and self.likelihood == "multinomial"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown actor config key {k!r}")
            out[k] = _coerce(v, kinds[k])
        return cls(**out)


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    if type_name in ("bool", bool):
        if value.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {value!r}")
        return value.lower() == "true"
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    return value


# -- per-row losses -------------------------------------------------------


def nll_multinomial(x, pi):
    """Multinomial negative log-likelihood ``-sum(x * log(pi))`` (unnormalized)."""
    x = np.asarray(x, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    nz = x != 0
    return float(-np.sum(x[nz] * np.log(pi[nz])))


def nll_gaussian(x, scores):
    """Unit-variance Gaussian NLL with constants dropped."""
    d = np.asarray(scores, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return 0.5 * float(np.dot(d, d))


def kl_gaussian(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    return 0.5 * np.sum(np.exp(log_var) + mu * mu - 1.0 - log_var, axis=-1)


def bpr_loss(scores, x, negatives=None):
    """Sum of ``sigmoid(s_j - s_i)`` over positive i and negative j.

    Returns ``(loss, grad_scores)``. ``negatives`` restricts the negative set
    (e.g. to a uniform sample); by default every non-interacted item is used.
    """
    scores = np.asarray(scores, dtype=np.float64)
    x = np.asarray(x)
    pos = np.flatnonzero(x > 0)
    neg = np.flatnonzero(x <= 0) if negatives is None else np.asarray(negatives)
    grad = np.zeros_like(scores)
    if pos.size == 0 or neg.size == 0:
        return 0.0, grad
    p = sigmoid(scores[neg][None, :] - scores[pos][:, None])
    dp = p * (1.0 - p)
    np.add.at(grad, neg, dp.sum(axis=0))
    np.add.at(grad, pos, -dp.sum(axis=1))
    return float(p.sum()), grad


def warp_weight(r):
    """Rank weight ``w(r) = sum_{i=1..r} 1/i`` (0 for r = 0)."""
    return float(sum(1.0 / i for i in range(1, int(r) + 1)))


def warp_loss(scores, x, mode="exact", rng=None):
    """WARP loss ``sum_i w(r_i) sum_j max(0, 1 + s_j - s_i)`` with its gradient.

    ``r_i`` is the number of negatives violating the unit margin against
    positive ``i``. In ``sampled`` mode each positive looks at
    ``min(|K-|, ceil(M / |K+|))`` negatives drawn without replacement, so the
    whole row costs O(M); the violation count and hinge sum are rescaled to
    the full negative set. Returns ``(loss, grad_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    x = np.asarray(x)
    pos = np.flatnonzero(x > 0)
    neg = np.flatnonzero(x <= 0)
    grad = np.zeros_like(scores)
    if pos.size == 0 or neg.size == 0:
        return 0.0, grad
    if mode == "exact":
        margins = 1.0 + scores[neg][None, :] - scores[pos][:, None]
        viol = margins > 0
        w = np.array([warp_weight(r) for r in viol.sum(axis=1)])
        loss = float(np.sum(w * np.where(viol, margins, 0.0).sum(axis=1)))
        coeff = viol * w[:, None]
        np.add.at(grad, neg, coeff.sum(axis=0))
        np.add.at(grad, pos, -coeff.sum(axis=1))
        return loss, grad
    if mode != "sampled":
        raise ValueError("mode must be 'exact' or 'sampled'")
    if rng is None:
        raise ValueError("sampled WARP needs an rng")
    n = min(neg.size, math.ceil(scores.size / pos.size))
    scale = neg.size / n
    loss = 0.0
    for i in pos:
        js = neg[rng.choice(neg.size, size=n, replace=False)]
        margins = 1.0 + scores[js] - scores[i]
        viol = margins > 0
        w = warp_weight(math.floor(scale * viol.sum() + 0.5))
        loss += w * scale * float(margins[viol].sum())
        np.add.at(grad, js[viol], w * scale)
        grad[i] -= w * scale * viol.sum()
    return loss, grad


# -- the network ------------------------------------------------------------


@dataclass
class ForwardPass:
    """Everything a backward pass needs, plus per-row loss terms."""

    X: np.ndarray
    inputs: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray | None
    eps: np.ndarray | None
    z: np.ndarray
    logits: np.ndarray
    enc_cache: list
    dec_cache: list
    data_loss: np.ndarray  # per row: NLL or ranking loss (the critic's first feature)
    data_grad: np.ndarray  # d data_loss_row / d logits_row
    kl: np.ndarray

    @property
    def pi(self):
        return softmax_stable(self.logits)


class Actor:
    """Encoder/decoder pair with explicit forward and backward passes.

    Parameters live in ``self.params`` as a dict of float64 arrays named
    ``encoder.<k>.weight`` / ``encoder.<k>.bias`` and likewise for the decoder.
    """

    def __init__(self, config, rng=None, params=None):
        self.config = config
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            expected = self._shapes()
            got = {k: v.shape for k, v in self.params.items()}
            if got != expected:
                raise ValueError(f"parameter shapes {got} do not match config {expected}")
        else:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            self.params = {}
            for name, shape in self._shapes().items():
                if name.endswith(".weight"):
                    self.params[name] = glorot_init(shape[0], shape[1], rng)
                else:
                    self.params[name] = np.zeros(shape)

    # -- structure --

    def _dims(self):
        c = self.config
        enc_out = 2 * c.latent_dim if c.variational else c.latent_dim
        enc = [c.n_items, *c.hidden_layers, enc_out]
        dec = [c.latent_dim, *c.hidden_layers, c.n_items]
        return enc, dec

    def _shapes(self):
        shapes = {}
        for part, dims in zip(("encoder", "decoder"), self._dims()):
            for k in range(len(dims) - 1):
                shapes[f"{part}.{k}.weight"] = (dims[k], dims[k + 1])
                shapes[f"{part}.{k}.bias"] = (dims[k + 1],)
        return shapes

    def _stack(self, part):
        dims = self._dims()[0 if part == "encoder" else 1]
        n = len(dims) - 1
        layers = [
            AffineLayer(self.params[f"{part}.{k}.weight"], self.params[f"{part}.{k}.bias"])
            for k in range(n)
        ]
        last = self.config.latent_activation if part == "encoder" else "linear"
        acts = ["tanh"] * (n - 1) + [last]
        return layers, acts

    def weight_names(self):
        return [k for k in self.params if k.endswith(".weight")]

    # -- passes --

    def encode(self, inputs):
        """Map normalized input rows to ``(mu, log_var)``; ``log_var`` is None if deterministic."""
        layers, acts = self._stack("encoder")
        out, cache = mlp_forward(layers, acts, inputs)
        if self.config.variational:
            k = self.config.latent_dim
            return out[:, :k], out[:, k:], cache
        return out, None, cache

    def decode(self, z):
        layers, acts = self._stack("decoder")
        return mlp_forward(layers, acts, z)

    def forward(self, X, mask=None, rng=None, eps=None, sample=True):
        """Full forward pass on target rows ``X`` with observed-mask ``mask``.

        The encoder sees ``X * mask`` normalized to unit length. With
        ``sample`` set and a variational actor, ``z = mu + exp(log_var/2) * eps``
        where ``eps`` is drawn from ``rng`` unless given; otherwise ``z = mu``.
        """
        X = np.asarray(X, dtype=np.float64)
        x_h = X if mask is None else X * mask
        inputs = l2_normalize_rows(x_h)
        mu, log_var, enc_cache = self.encode(inputs)
        if self.config.variational and sample:
            if eps is None:
                eps = rng.standard_normal(mu.shape)
            z = reparam_sample(mu, log_var, eps=eps)
        else:
            eps = None
            z = mu
        logits, dec_cache = self.decode(z)
        data_loss, data_grad = self._data_loss(X, logits, rng)
        kl = kl_gaussian(mu, log_var) if log_var is not None else np.zeros(X.shape[0])
        return ForwardPass(
            X, inputs, mu, log_var, eps, z, logits, enc_cache, dec_cache,
            data_loss, data_grad, kl,
        )

    def _data_loss(self, X, logits, rng):
        c = self.config
        if c.loss_kind == "mle" and c.likelihood == "multinomial":
            logp = log_softmax(logits)
            loss = -np.sum(X * logp, axis=1)
            grad = np.exp(logp) * X.sum(axis=1, keepdims=True) - X
            return loss, grad
        if c.loss_kind == "mle":
            diff = logits - X
            return 0.5 * np.sum(diff * diff, axis=1), diff
        loss = np.zeros(X.shape[0])
        grad = np.zeros_like(logits)
        for r in range(X.shape[0]):
            if c.loss_kind == "bpr":
                negatives = None
                if c.n_negatives:
                    neg = np.flatnonzero(X[r] <= 0)
                    take = min(c.n_negatives, neg.size)
                    negatives = neg[rng.choice(neg.size, size=take, replace=False)]
                loss[r], grad[r] = bpr_loss(logits[r], X[r], negatives)
            else:
                loss[r], grad[r] = warp_loss(logits[r], X[r], c.warp_mode, rng)
        return loss, grad

    def backward(self, fp, grad_data, grad_kl=None):
        """Gradients of ``sum_r grad_data[r] * data_loss[r] + grad_kl[r] * kl[r]``.

        ``grad_data`` / ``grad_kl`` are per-row upstream coefficients, so the
        same routine serves the likelihood objective and the critic objective.
        """
        grads = {}
        d_logits = np.asarray(grad_data)[:, None] * fp.data_grad
        layers, acts = self._stack("decoder")
        d_z, dec_grads = mlp_backward(layers, acts, fp.dec_cache, d_logits)
        for k, (gw, gb) in enumerate(dec_grads):
            grads[f"decoder.{k}.weight"], grads[f"decoder.{k}.bias"] = gw, gb
        if self.config.variational:
            d_mu = d_z.copy()
            if fp.eps is not None:
                std = np.exp(0.5 * fp.log_var)
                d_log_var = d_z * fp.eps * 0.5 * std
            else:
                d_log_var = np.zeros_like(d_z)
            if grad_kl is not None:
                g = np.asarray(grad_kl)[:, None]
                d_mu += g * fp.mu
                d_log_var += g * 0.5 * (np.exp(fp.log_var) - 1.0)
            d_enc = np.concatenate([d_mu, d_log_var], axis=1)
        else:
            d_enc = d_z
        layers, acts = self._stack("encoder")
        _, enc_grads = mlp_backward(layers, acts, fp.enc_cache, d_enc)
        for k, (gw, gb) in enumerate(enc_grads):
            grads[f"encoder.{k}.weight"], grads[f"encoder.{k}.bias"] = gw, gb
        return grads

    def uses_l2(self, beta):
        return (not self.config.variational) or beta == 0

    def l2_penalty(self):
        return self.config.l2_weight * sum(float(np.sum(self.params[w] ** 2)) for w in self.weight_names())

    def elbo_loss(self, X, mask, beta, rng=None, eps=None):
        """Batch-mean ``data_loss + beta * KL`` (plus l2 when beta is 0), with gradients.

        Returns ``(loss, forward_pass, grads)``.
        """
        if beta < 0:
            raise ValueError("beta must be >= 0")
        fp = self.forward(X, mask, rng=rng, eps=eps)
        n = X.shape[0]
        loss = float(np.mean(fp.data_loss + beta * fp.kl))
        coeff = np.full(n, 1.0 / n)
        grads = self.backward(fp, coeff, beta * coeff if self.config.variational else None)
        if self.uses_l2(beta) and self.config.l2_weight:
            loss += self.l2_penalty()
            for w in self.weight_names():
                grads[w] = grads[w] + 2.0 * self.config.l2_weight * self.params[w]
        return loss, fp, grads

    def predict(self, X_observed):
        """Deterministic scores (z = mu): probabilities for multinomial MLE, raw otherwise."""
        inputs = l2_normalize_rows(np.asarray(X_observed, dtype=np.float64))
        mu, _, _ = self.encode(inputs)
        logits, _ = self.decode(mu)
        if self.config.scores_are_probabilities:
            return softmax_stable(logits)
        return logits

    def copy(self):
        return Actor(self.config, params=self.params)

    def with_config(self, **changes):
        return Actor(replace(self.config, **changes), params=self.params)


def reparam_sample(mu, log_var, rng=None, variational=True, eps=None):
    """``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)``; just ``mu`` if not variational."""
    mu = np.asarray(mu, dtype=np.float64)
    if not variational:
        return mu.copy()
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    return mu + activation_forward("exp", 0.5 * np.asarray(log_var)) * eps
