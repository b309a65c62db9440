"""Torch-facing training losses.

The evidential objective runs through :mod:`epep.evidential`, whose closed-form
logit gradients are handed to autograd directly.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .evidential import DEFAULT_LAMBDA, evidential_loss_and_grad


class _EvidentialLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, targets, lam):
        z = logits.detach().numpy()
        l_eb, l_kl, grad = evidential_loss_and_grad(z, targets.numpy(), lam)
        n = z.shape[0]
        ctx.save_for_backward(torch.from_numpy(grad / n))
        total = (1.0 - lam) * l_eb + lam * l_kl
        return torch.tensor(float(np.mean(total)), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None


def evidential_loss(logits: torch.Tensor, targets: torch.Tensor, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """Batch-mean of ``(1 - lam) * loss_eb + lam * loss_kl``; ``targets`` are ``(N, K)`` 0/1 rows."""
    return _EvidentialLoss.apply(logits, targets, lam)


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy (sigmoid BCE for multi-hot rows)."""
    if bool((targets.sum(dim=1) == 1).all()):
        return F.cross_entropy(logits, targets.argmax(dim=1))
    return F.binary_cross_entropy_with_logits(logits, targets)


def make_loss(kind: str, lam: float = DEFAULT_LAMBDA):
    """``loss(logits, targets)`` for ``kind`` in {"evidential", "ce"}."""
    if kind == "evidential":
        return lambda logits, targets: evidential_loss(logits, targets, lam)
    if kind == "ce":
        return cross_entropy_loss
    raise ValueError(f"unknown loss {kind!r}")
