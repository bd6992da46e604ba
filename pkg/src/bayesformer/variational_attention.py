"""Stochastic attention rows: Gaussian logit noise and implicitly
reparameterized Dirichlet rows, plus the data-dependent amortizers.

Row distributions operate on the last axis; everything is vectorized over
arbitrary leading (batch, head, query) axes. `valid` masks mark usable key
positions, and invalid positions never receive probability mass.
"""
from __future__ import annotations

import numpy as np

from .distributions import dirichlet_sample_t
from .tensor import NEG_INF, ContractError, Tensor, as_tensor, gelu, masked_fill, softmax

ALPHA_FLOOR = 1e-6


def _check_valid(valid: np.ndarray) -> np.ndarray:
    valid = np.asarray(valid, dtype=bool)
    if not np.all(valid.any(axis=-1)):
        raise ContractError("attention row with no valid positions")
    return valid


def gaussian_logit_rows(logits: Tensor, log_var, valid: np.ndarray,
                        rng: np.random.Generator,
                        prior_mean: float = 0.0, prior_var: float = 1.0,
                        prior_draw: bool = False):
    """Sample rows by perturbing logits with reparameterized Gaussian noise.

    Returns (weights, kl) where kl sums the per-logit Gaussian KL against the
    N(prior_mean, prior_var) logit prior over valid positions. With
    prior_draw=True the logits are drawn from the prior itself.
    """
    valid = _check_valid(np.broadcast_to(valid, logits.shape))
    log_var = as_tensor(log_var)
    eps = rng.standard_normal(logits.shape)
    if prior_draw:
        sampled = as_tensor(prior_mean + np.sqrt(prior_var) * eps)
    else:
        sigma = (0.5 * log_var).exp()
        sampled = logits + sigma * eps
    weights = softmax(masked_fill(sampled, ~valid, NEG_INF), axis=-1)

    var = log_var.exp()
    mu = logits - prior_mean if prior_mean else logits
    kl_el = 0.5 * ((var + mu * mu) * (1.0 / prior_var) - 1.0 + np.log(prior_var) - log_var)
    kl = (kl_el * valid.astype(np.float64)).sum()
    return weights, kl


def dirichlet_kl_rows(alpha: Tensor, beta: Tensor, valid: np.ndarray) -> Tensor:
    """Sum over rows of KL(Dir(alpha_row) || Dir(beta_row)) restricted to
    valid positions, as a differentiable Tensor expression."""
    m = valid.astype(np.float64)
    a0 = (alpha * m).sum(axis=-1, keepdims=True)
    b0 = (beta * m).sum(axis=-1, keepdims=True)
    per_comp = (beta.lgamma() - alpha.lgamma()
                + (alpha - beta) * (alpha.digamma() - a0.digamma()))
    rows = a0.lgamma() - b0.lgamma() + (per_comp * m).sum(axis=-1, keepdims=True)
    return rows.sum()


def dirichlet_rows(base_rows: Tensor, sharpness, prior_sharpness: float,
                   valid: np.ndarray, rng: np.random.Generator,
                   floor: float = ALPHA_FLOOR, sampler=None):
    """Sample rows from Dir(sharpness * base_row) with implicit gradients.

    kl sums KL(Dir(a * A_i) || Dir(a_hat * A_i)) over rows; both concentration
    vectors share the contextual base row and are floored at `floor`.
    """
    valid = _check_valid(np.broadcast_to(valid, base_rows.shape))
    sharpness = as_tensor(sharpness)
    alpha = (sharpness * base_rows).clamp_min(floor)
    alpha_hat = (prior_sharpness * base_rows).clamp_min(floor)
    weights = dirichlet_sample_t(alpha, rng, mask=valid, sampler=sampler)
    kl = dirichlet_kl_rows(alpha, alpha_hat, valid)
    return weights, kl


def gaussian_attention_row(mean_logits, log_var, mask, rng: np.random.Generator):
    """Single-row [K]-shaped convenience wrapper around gaussian_logit_rows."""
    logits = as_tensor(mean_logits)
    return gaussian_logit_rows(logits, log_var, np.asarray(mask, dtype=bool), rng)


def dirichlet_attention_row(a_i, a, a_hat: float, mask, rng: np.random.Generator,
                            floor: float = ALPHA_FLOOR, sampler=None):
    """Single-row [K]-shaped convenience wrapper around dirichlet_rows."""
    base = as_tensor(a_i)
    return dirichlet_rows(base, a, a_hat, np.asarray(mask, dtype=bool), rng,
                          floor=floor, sampler=sampler)


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ContractError("softplus output is strictly positive")
    return float(np.log(np.expm1(y)))


class Amortizer:
    """One-hidden-layer GeLU network emitting per-row distribution parameters.

    Width equals the model hidden size; the final layer is zero-initialized so
    the initial output is the constant bias (log-variance 0, or an inverse
    softplus of the configured starting sharpness).
    """

    def __init__(self, hidden: int, out_dim: int, rng: np.random.Generator,
                 out_bias: float = 0.0):
        std = hidden ** -0.5
        self.w1 = Tensor(rng.normal(0.0, std, size=(hidden, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.full(out_dim, out_bias), requires_grad=True)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def __call__(self, x: Tensor, weights: dict | None = None, prefix: str = "") -> Tensor:
        if weights is not None:
            w1 = weights.get(f"{prefix}.w1", self.w1)
            b1 = weights.get(f"{prefix}.b1", self.b1)
            w2 = weights.get(f"{prefix}.w2", self.w2)
            b2 = weights.get(f"{prefix}.b2", self.b2)
        else:
            w1, b1, w2, b2 = self.w1, self.b1, self.w2, self.b2
        return gelu(x @ w1 + b1) @ w2 + b2
