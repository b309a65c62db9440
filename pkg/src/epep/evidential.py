"""Dirichlet evidence, the evidential classification loss and its KL regulariser.

Per sample with logits ``z`` and label vector ``y`` (one-hot or multi-hot)::

    e = relu(z),  alpha = e + 1,  S = sum(alpha),  p = alpha / S,  u = K / S
    loss_eb  = sum_j y_j (psi(S) - psi(alpha_j))
    alpha~   = y + (1 - y) * alpha
    loss_kl  = KL[Dir(alpha~) || Dir(1)]
    loss     = (1 - lam) * loss_eb + lam * loss_kl

Batched helpers operate on ``(N, K)`` arrays and return per-sample values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics import digamma, lgamma, trigamma

DEFAULT_LAMBDA = 0.004


@dataclass(frozen=True)
class DirichletOutput:
    evidence: np.ndarray
    alpha: np.ndarray
    strength: np.ndarray | float
    probs: np.ndarray
    uncertainty: np.ndarray | float

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]


def evidence_from_logits(logits) -> DirichletOutput:
    """Dirichlet parameters from raw logits, ``(K,)`` or batched ``(N, K)``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ConfigError(f"need at least two classes, got logits of shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    evidence = np.maximum(z, 0.0)
    alpha = evidence + 1.0
    strength = alpha.sum(axis=-1)
    k = z.shape[-1]
    probs = alpha / strength[..., None]
    uncertainty = k / strength
    if z.ndim == 1:
        strength, uncertainty = float(strength), float(uncertainty)
    return DirichletOutput(evidence, alpha, strength, probs, uncertainty)


def _labels_like(y, alpha: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != alpha.shape:
        raise ShapeError(f"label shape {y.shape} does not match Dirichlet shape {alpha.shape}")
    return y


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def loss_eb(d: DirichletOutput, y):
    """Expected cross-entropy under the Dirichlet (per sample)."""
    y = _labels_like(y, d.alpha)
    s = np.asarray(d.strength, dtype=np.float64)
    out = np.sum(y * (np.asarray(digamma(s))[..., None] - digamma(d.alpha)), axis=-1)
    return float(out) if out.ndim == 0 else out


def alpha_tilde(d: DirichletOutput, y) -> np.ndarray:
    y = _labels_like(y, d.alpha)
    return y + (1.0 - y) * d.alpha


def kl_to_uniform(alpha_t):
    """KL divergence from ``Dir(alpha_t)`` to the uniform Dirichlet ``Dir(1)``."""
    a = np.asarray(alpha_t, dtype=np.float64)
    if np.any(~(a > 0)):
        raise DomainError("Dirichlet parameters must be positive")
    k = a.shape[-1]
    s = a.sum(axis=-1)
    out = (
        lgamma(s)
        - np.sum(lgamma(a), axis=-1)
        - lgamma(float(k))
        + np.sum((a - 1.0) * (digamma(a) - np.asarray(digamma(s))[..., None]), axis=-1)
    )
    # algebraically >= 0; clamp cancellation noise at the minimiser
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")


def loss_combined(d: DirichletOutput, y, lam: float = DEFAULT_LAMBDA):
    _check_lambda(lam)
    return (1.0 - lam) * loss_eb(d, y) + lam * kl_to_uniform(alpha_tilde(d, y))


def evidential_loss_and_grad(logits, y, lam: float = DEFAULT_LAMBDA):
    """Per-sample combined loss and its gradient with respect to the logits.

    Returns ``(loss_eb, loss_kl, grad)`` where ``grad`` is d[(1-lam) loss_eb +
    lam loss_kl]/d logits.  The relu subgradient at exactly zero is zero.
    """
    _check_lambda(lam)
    d = evidence_from_logits(logits)
    y = _labels_like(y, d.alpha)
    alpha = d.alpha
    s = np.asarray(d.strength, dtype=np.float64)
    k = alpha.shape[-1]

    l_eb = np.sum(y * (np.asarray(digamma(s))[..., None] - digamma(alpha)), axis=-1)
    # d l_eb / d alpha_k = (sum_j y_j) psi'(S) - y_k psi'(alpha_k)
    g_eb = y.sum(axis=-1, keepdims=True) * np.asarray(trigamma(s))[..., None] - y * trigamma(alpha)

    a_t = y + (1.0 - y) * alpha
    s_t = a_t.sum(axis=-1)
    l_kl = kl_to_uniform(a_t)
    # d KL / d alpha~_k = (alpha~_k - 1) psi'(alpha~_k) - (S~ - K) psi'(S~)
    g_kl_t = (a_t - 1.0) * trigamma(a_t) - ((s_t - k) * trigamma(s_t))[..., None]
    g_kl = (1.0 - y) * g_kl_t

    g_alpha = (1.0 - lam) * g_eb + lam * g_kl
    z = np.asarray(logits, dtype=np.float64)
    grad = np.where(z > 0, g_alpha, 0.0)
    if z.ndim == 1:
        return float(l_eb), float(l_kl), grad
    return l_eb, np.asarray(l_kl), grad


def evidential_gradients(logits, y, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """d loss_combined / d logits."""
    return evidential_loss_and_grad(logits, y, lam)[2]


def predict_multilabel(d: DirichletOutput) -> np.ndarray:
    """Multi-label decision: class j is on when ``p_j`` exceeds ``1/K``."""
    return d.probs > 1.0 / d.num_classes
