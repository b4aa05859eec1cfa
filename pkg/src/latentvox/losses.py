"""Training losses: focal loss for occupancy, cross-entropy for labels.

Each *_grad variant returns (loss, gradient wrt first argument) so trainers
do not recompute the forward expression. Predictions are clamped to
[eps, 1-eps] before the focal terms; the gradient is zero where the clamp is
active.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

FOCAL_EPS = 1e-7


def focal_loss_grad(pred, target, alpha=0.7, gamma=2.0, eps=FOCAL_EPS):
    """Mean binary focal loss over all voxels and its gradient wrt pred.

    pred: occupancy probabilities in [0, 1]; target: {0, 1} same shape.
    Occupied voxels are weighted by alpha, empty ones by (1 - alpha).
    """
    pred = np.asarray(pred)
    t = np.asarray(target).astype(pred.dtype)
    inside = (pred > eps) & (pred < 1.0 - eps)
    pc = np.clip(pred, eps, 1.0 - eps)
    log_p = np.log(pc)
    log_q = np.log1p(-pc)
    one_m = 1.0 - pc
    # occupied: -alpha (1-p)^g log p ; empty: -(1-alpha) p^g log(1-p)
    term_occ = -alpha * one_m ** gamma * log_p
    term_emp = -(1.0 - alpha) * pc ** gamma * log_q
    loss = float(np.mean(t * term_occ + (1.0 - t) * term_emp))
    d_occ = alpha * (gamma * one_m ** (gamma - 1.0) * log_p - one_m ** gamma / pc)
    d_emp = (1.0 - alpha) * (-gamma * pc ** (gamma - 1.0) * log_q + pc ** gamma / one_m)
    grad = (t * d_occ + (1.0 - t) * d_emp) * inside / pred.size
    return loss, grad


def focal_loss(pred, target, alpha=0.7, gamma=2.0, eps=FOCAL_EPS):
    return focal_loss_grad(pred, target, alpha, gamma, eps)[0]


def focal_loss_logits_grad(logits, target, alpha=0.7, gamma=2.0):
    """Mean binary focal loss computed from logits, and its gradient.

    Folding the sigmoid into the loss keeps the gradient bounded (it tends to
    -alpha / (1-alpha) as the prediction saturates the wrong way) instead of
    dying in a clamp, so a collapsed decoder can always recover.
    """
    z = np.asarray(logits)
    t = np.asarray(target).astype(z.dtype)
    p = expit(z)
    q = expit(-z)
    log_p = -np.logaddexp(0.0, -z)  # log sigmoid(z)
    log_q = -np.logaddexp(0.0, z)
    term_occ = -alpha * q ** gamma * log_p
    term_emp = -(1.0 - alpha) * p ** gamma * log_q
    loss = float(np.mean(t * term_occ + (1.0 - t) * term_emp))
    d_occ = -alpha * q ** gamma * (q - gamma * p * log_p)
    d_emp = (1.0 - alpha) * p ** gamma * (p - gamma * q * log_q)
    grad = (t * d_occ + (1.0 - t) * d_emp) / z.size
    return loss, grad


def focal_loss_logits(logits, target, alpha=0.7, gamma=2.0):
    return focal_loss_logits_grad(logits, target, alpha, gamma)[0]


def softmax(logits):
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_grad(logits, labels):
    """Mean cross-entropy over the batch and gradient wrt logits.

    logits: (N, C) or (C,); labels: int array (N,) or scalar.
    """
    logits = np.asarray(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[0]
    lsm = log_softmax(logits)
    loss = float(-lsm[np.arange(n), labels].mean())
    grad = np.exp(lsm)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    if squeeze:
        grad = grad[0]
    return loss, grad


def cross_entropy(logits, labels):
    return cross_entropy_grad(logits, labels)[0]
