"""Dense float64 building blocks with hand-written backward passes.

Every forward function here has a matching backward. Matrices are plain
``numpy.ndarray`` objects of dtype float64 with shape ``(rows, cols)``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

EXP_CLAMP = 700.0

# how many entries were clamped before exp(), keyed by activation kind
saturation_counts: Counter = Counter()

ACTIVATIONS = ("tanh", "relu", "sigmoid", "exp", "linear")


def as_matrix(x, name="x"):
    """Coerce ``x`` to a 2-D float64 array, promoting vectors to one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    return x


@dataclass
class AffineLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise ValueError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


def glorot_init(in_dim, out_dim, rng):
    """Uniform Glorot matrix with entries in +-sqrt(6 / (in_dim + out_dim))."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"dimensions must be >= 1, got {in_dim}x{out_dim}")
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(in_dim, out_dim))


def init_affine(in_dim, out_dim, rng):
    return AffineLayer(glorot_init(in_dim, out_dim, rng), np.zeros(out_dim))


def affine_forward(layer, x):
    x = as_matrix(x)
    if x.shape[1] != layer.in_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    return x @ layer.weight + layer.bias


def affine_backward(layer, x, grad_out):
    """Return ``(grad_x, grad_W, grad_b)`` for ``out = x @ W + b``."""
    x = as_matrix(x)
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != (x.shape[0], layer.out_dim) or x.shape[1] != layer.in_dim:
        raise ValueError(
            f"shapes x={x.shape}, grad_out={grad_out.shape}, "
            f"weight={layer.weight.shape} are inconsistent"
        )
    return grad_out @ layer.weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(kind, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "exp":
        over = x > EXP_CLAMP
        if over.any():
            saturation_counts["exp"] += int(over.sum())
            x = np.minimum(x, EXP_CLAMP)
        return np.exp(x)
    if kind == "linear":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(kind, x, y, grad_out):
    """Backward pass given the forward input ``x`` and output ``y``."""
    if kind == "tanh":
        return grad_out * (1.0 - y * y)
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        return grad_out * y * (1.0 - y)
    if kind == "exp":
        # clamped region has zero slope
        return grad_out * y * (np.asarray(x) <= EXP_CLAMP)
    if kind == "linear":
        return np.array(grad_out, dtype=np.float64)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_stable(logits):
    """Row-wise softmax with max subtraction; works on vectors and matrices."""
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- batch normalization ----------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5
    # running stats are seeded from the first training batch instead of (0, 1)
    initialized: bool = False

    @classmethod
    def create(cls, dim, momentum=0.99, epsilon=1e-5):
        return cls(
            gamma=np.ones(dim),
            beta_shift=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            epsilon=epsilon,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batch_norm_forward(x, state, mode="train", update_running=True):
    """Normalize columns of ``x``.

    In ``train`` mode batch statistics are used (biased variance) and, if
    ``update_running`` is set, the running averages are updated with
    ``running = momentum * running + (1 - momentum) * batch``. ``eval`` mode
    uses the running statistics only.

    Returns ``(y, cache)``; pass the cache to :func:`batch_norm_backward`.
    """
    x = as_matrix(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_running:
            if not state.initialized:
                state.running_mean = mean.copy()
                state.running_var = var.copy()
                state.initialized = True
            else:
                m = state.momentum
                state.running_mean = m * state.running_mean + (1.0 - m) * mean
                state.running_var = m * state.running_var + (1.0 - m) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    y = state.gamma * x_hat + state.beta_shift
    return y, BatchNormCache(x_hat, inv_std, state.gamma.copy(), mode == "train")


def batch_norm_backward(cache, grad_out):
    """Return ``(grad_x, grad_gamma, grad_beta_shift)``."""
    grad_out = as_matrix(grad_out, "grad_out")
    grad_gamma = (grad_out * cache.x_hat).sum(axis=0)
    grad_shift = grad_out.sum(axis=0)
    g = grad_out * cache.gamma
    if not cache.train:
        return g * cache.inv_std, grad_gamma, grad_shift
    n = grad_out.shape[0]
    grad_x = (cache.inv_std / n) * (
        n * g - g.sum(axis=0) - cache.x_hat * (g * cache.x_hat).sum(axis=0)
    )
    return grad_x, grad_gamma, grad_shift


# -- stacked dense networks -----------------------------------------------


def mlp_forward(layers, activations, x):
    """Run ``x`` through affine layers each followed by its activation.

    Returns the output and a cache list of ``(input, pre, post)`` per layer.
    """
    cache = []
    h = as_matrix(x)
    for layer, kind in zip(layers, activations):
        pre = affine_forward(layer, h)
        post = activation_forward(kind, pre)
        cache.append((h, pre, post))
        h = post
    return h, cache


def mlp_backward(layers, activations, cache, grad_out):
    """Backward through :func:`mlp_forward`; returns ``(grad_x, [(gW, gb), ...])``."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        h_in, pre, post = cache[i]
        g = activation_backward(activations[i], pre, post, g)
        g, gw, gb = affine_backward(layers[i], h_in, g)
        grads[i] = (gw, gb)
    return g, grads


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts keyed by parameter-block name.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ValueError(f"params and grads disagree on blocks {sorted(missing)}")
    for name in params:
        g = grads[name]
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(
                f"gradient for {name!r} has shape {np.shape(g)}, "
                f"parameter has {np.shape(params[name])}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
